import numpy as np
import pytest

from ecse.cli import EXIT_FAIL, EXIT_INPUT, EXIT_OK, main
from ecse.structures import parse_xyz


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_dataset_then_symmetrize(tmp_path, capsys):
    xyz = tmp_path / "d.xyz"
    assert run(capsys, "gen-dataset", "--dataset", "periodic", "--n", "2", "--out", str(xyz))[0] == EXIT_OK
    assert len(parse_xyz(xyz.read_text())) == 2
    code, out, _ = run(capsys, "symmetrize", "--xyz", str(xyz), "--backbone", "mlp")
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0] == "structure_id,value" and len(lines) == 3


def test_symmetrize_vector_output(capsys):
    code, out, _ = run(capsys, "symmetrize", "--n", "1", "--output", "vector")
    assert code == EXIT_OK and out.splitlines()[0] == "structure_id,y0,y1,y2"


@pytest.mark.parametrize("backbone", ["mlp", "pet", "pet2body"])
def test_verify_equivariance_passes(capsys, backbone):
    code, out, err = run(capsys, "verify-equivariance", "--n", "2", "--rotations", "2", "--backbone", backbone)
    assert code == EXIT_OK
    assert "symmetrized max discrepancy" in err
    assert len(out.splitlines()) == 1 + 4


def test_verify_equivariance_fails_with_impossible_tolerance(capsys):
    code, _, _ = run(capsys, "verify-equivariance", "--n", "2", "--rotations", "2", "--tol", "0",
                     "--backbone", "mlp")
    assert code == EXIT_FAIL


def test_verify_smoothness_and_fd_forces(tmp_path, capsys):
    out = tmp_path / "s.csv"
    code, _, err = run(capsys, "verify-smoothness", "--n", "2", "--perturbations", "3", "--backbone", "mlp",
                       "--amplitudes", "1e-3,1e-6,1e-5,1e-4", "--out", str(out))
    assert code == EXIT_OK and "slope" in err
    assert out.read_text().startswith("structure_id,sigma,perturbation_id,delta\n")
    code, text, _ = run(capsys, "fd-forces", "--n", "1", "--backbone", "mlp")
    assert code == EXIT_OK and len(text.splitlines()) == 1 + 5


def test_sweep_tradeoff(capsys):
    code, out, _ = run(capsys, "sweep-tradeoff", "--n", "2", "--perturbations", "2", "--backbone", "mlp")
    assert code == EXIT_OK
    assert [l.split(",")[0] for l in out.splitlines()[1:]] == ["loose", "tight"]


def test_train_toy_and_checkpoint(tmp_path, capsys):
    ck = tmp_path / "pet.npz"
    code, out, err = run(capsys, "train-toy", "--n-train", "8", "--n-val", "4", "--epochs", "2",
                         "--save", str(ck))
    assert code == EXIT_OK and "val E rmse" in err
    assert len(out.splitlines()) == 1 + 3
    code, out, _ = run(capsys, "symmetrize", "--n", "1", "--checkpoint", str(ck))
    assert code == EXIT_OK and len(out.splitlines()) == 2


def test_config_file_is_applied(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("omega = 0.2\n")
    assert run(capsys, "symmetrize", "--n", "1", "--backbone", "mlp", "--config", str(cfg))[0] == EXIT_OK


@pytest.mark.parametrize(
    "argv",
    [
        ["symmetrize", "--preset", "medium"],
        ["symmetrize", "--config", "/nonexistent/cfg.txt"],
        ["symmetrize", "--checkpoint", "/nonexistent/pet.npz"],
        ["nonsense"],
        ["train-toy", "--epochs", "many"],
    ],
)
def test_input_errors_exit_2(capsys, argv):
    assert run(capsys, *argv)[0] == EXIT_INPUT


def test_bad_xyz_and_bad_config_values(tmp_path, capsys):
    bad = tmp_path / "bad.xyz"
    bad.write_text("2\ncomment\nH 0 0 0\n")
    code, _, err = run(capsys, "symmetrize", "--xyz", str(bad))
    assert code == EXIT_INPUT and "line 4" in err
    cfg = tmp_path / "c.txt"
    cfg.write_text("t_f = 2.0\n")
    assert run(capsys, "symmetrize", "--n", "1", "--config", str(cfg))[0] == EXIT_INPUT

"""Desk-scale Point Edge Transformer (PET) and its rotation-invariant two-body variant."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..smoothmath import fc
from ..structures import Structure
from . import layers as L
from .graph import PaddedGraph, build_graph
from .base import Prediction, output_shape


@dataclass(frozen=True)
class PetShape:
    """Architecture hyperparameters; the flat weight layout is a function of these."""

    species: tuple = (1, 6)
    d_pet: int = 32
    n_gnn: int = 2
    n_tl: int = 2
    n_heads: int = 2
    d_ffn: int = 64
    r_c: float = 4.0
    delta_rc: float = 1.0
    bond_mode: str = "sum"  # or "average"
    use_attribute_channel: bool = False
    two_body: bool = False
    species_as_first_message: bool = False
    output: str = "scalar"  # or "vector"

    def __post_init__(self):
        if self.d_pet % self.n_heads:
            raise ValueError("d_pet must be divisible by n_heads")
        if self.bond_mode not in ("sum", "average"):
            raise ValueError(f"bond_mode must be 'sum' or 'average', got {self.bond_mode!r}")
        if self.output not in ("scalar", "vector"):
            raise ValueError(f"output must be 'scalar' or 'vector', got {self.output!r}")
        if self.two_body and self.output != "scalar":
            raise ValueError("the two-body variant only predicts scalars")
        object.__setattr__(self, "species", tuple(int(s) for s in self.species))

    @property
    def out_dim(self) -> int:
        return 1 if self.output == "scalar" else 3

    @property
    def pos_in(self) -> int:
        base = 1 if self.two_body else 3
        return base + (1 if self.use_attribute_channel else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["species"] = list(self.species)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PetShape":
        d = dict(d)
        d["species"] = tuple(d["species"])
        return cls(**d)


def pet_layout(shape: PetShape) -> L.ParamLayout:
    d, S = shape.d_pet, len(shape.species)
    lay = L.ParamLayout()
    for k in range(shape.n_gnn):
        p = f"b{k}"
        lay.add(f"{p}.emb_c", (S, d), 1.0)
        if not shape.species_as_first_message or k == 0:
            lay.add(f"{p}.emb_n", (S, d), 1.0)
        lay.linear(f"{p}.pos", shape.pos_in, d)
        if shape.species_as_first_message or k == 0:
            n_in = 2 * d
        else:
            n_in = 3 * d
        lay.mlp2(f"{p}.comp", n_in, d, d)
        if shape.use_attribute_channel:
            lay.linear(f"{p}.cpos", 1, d)
            lay.mlp2(f"{p}.ccomp", 2 * d, d, d)
        for t in range(shape.n_tl):
            q = f"{p}.tl{t}"
            lay.add(f"{q}.ln1.ln_g", (d,), 1.0)
            lay.add(f"{q}.ln1.ln_b", (d,), 1.0)
            for m in ("Wq", "Wk", "Wv", "Wo"):
                lay.add(f"{q}.attn.{m}", (d, d), 1.0 / np.sqrt(d))
            lay.add(f"{q}.attn.bo", (d,), 1.0 / np.sqrt(d))
            lay.add(f"{q}.ln2.ln_g", (d,), 1.0)
            lay.add(f"{q}.ln2.ln_b", (d,), 1.0)
            lay.mlp2(f"{q}.ffn", d, shape.d_ffn, d)
        lay.mlp2(f"{p}.hc", d, d, shape.out_dim)
        lay.mlp2(f"{p}.hn", d, d, shape.out_dim)
    return lay


def random_init(seed: int, shape: PetShape) -> np.ndarray:
    """Deterministic uniform initialisation, +-1/sqrt(fan_in) per weight matrix."""
    return pet_layout(shape).random_init(seed)


def _mlp2(w, name, x):
    return L.mlp2_fwd(x, w[f"{name}.l1.W"], w[f"{name}.l1.b"], w[f"{name}.l2.W"], w[f"{name}.l2.b"])


def _mlp2_back(w, g, name, dy, cache):
    dx, dW1, db1, dW2, db2 = L.mlp2_bwd(dy, cache, w[f"{name}.l1.W"], w[f"{name}.l2.W"])
    g[f"{name}.l1.W"] += dW1
    g[f"{name}.l1.b"] += db1
    g[f"{name}.l2.W"] += dW2
    g[f"{name}.l2.b"] += db2
    return dx


@dataclass
class PetModel:
    """Message-passing PET evaluated on whole structures.

    ``forward`` takes a batch of displacement sets ``(F, N, M, 3)`` sharing one
    graph topology, which is how frame ensembles and finite-difference stencils
    are evaluated in a single pass.
    """

    shape: PetShape
    weights: np.ndarray
    seed: int = 0
    layout: L.ParamLayout = field(init=False, repr=False)

    output_kind = "scalar"
    locality = "global"

    def __post_init__(self):
        self.layout = pet_layout(self.shape)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.layout.size,):
            raise ValueError(
                f"parameter-shape mismatch: got {self.weights.shape}, expected ({self.layout.size},)"
            )
        self._sp_index = {z: i for i, z in enumerate(self.shape.species)}

    @classmethod
    def create(cls, shape: PetShape, seed: int = 0) -> "PetModel":
        return cls(shape, random_init(seed, shape), seed)

    @property
    def kind(self) -> str:
        return self.shape.output

    @property
    def rank(self) -> int:
        return 0 if self.shape.output == "scalar" else 1

    @property
    def invariant(self) -> bool:
        return self.shape.two_body

    def graph(self, s: Structure) -> PaddedGraph:
        return build_graph(s, self.shape.r_c, self.shape.delta_rc)

    def _species_idx(self, z):
        try:
            return np.vectorize(self._sp_index.__getitem__, otypes=[int])(z)
        except KeyError as err:
            raise ValueError(f"species {err.args[0]} not in model species {self.shape.species}") from None

    # -- forward / backward -------------------------------------------------

    def forward(self, graph: PaddedGraph, disp=None, weights=None, keep_cache=False):
        """Per-atom contributions, shape (F, N, out_dim)."""
        sh = self.shape
        w = self.layout.views(self.weights if weights is None else weights)
        if disp is None:
            disp = graph.disp[None]
        F, N, M, _ = disp.shape
        d = sh.d_pet
        T = M + 1
        B = F * N
        sp = self._species_idx(graph.species) if N else np.zeros(0, dtype=int)
        sp_n = sp[graph.nbr]
        dist = np.sqrt(np.sum(disp * disp, axis=-1))
        gate = np.where(graph.mask[None], fc(dist, sh.r_c, sh.delta_rc), 0.0)
        if sh.two_body:
            pos_in = dist[..., None]
        else:
            pos_in = disp
        if sh.use_attribute_channel:
            a_n = np.broadcast_to(graph.attribute[graph.nbr][None, ..., None], (F, N, M, 1))
            pos_in = np.concatenate([pos_in, a_n], axis=-1)
        gate_tok = np.concatenate([np.ones((F, N, 1)), gate], axis=-1).reshape(B, T)
        out = np.zeros((F, N, sh.out_dim))
        gsum = gate.sum(-1)
        caches = []
        msg = None
        for k in range(sh.n_gnn):
            p = f"b{k}"
            c = {}
            er_pre, c["pos"] = L.linear_fwd(pos_in, w[f"{p}.pos.W"], w[f"{p}.pos.b"])
            er, c["pos_act"] = L.silu_fwd(er_pre)
            parts = []
            if k == 0:
                if sh.species_as_first_message:
                    xt = np.broadcast_to(w[f"{p}.emb_n"][sp_n][None], (F, N, M, d))
                    parts = [xt]
                else:
                    xt = None
                    parts = [np.broadcast_to(w[f"{p}.emb_n"][sp_n][None], (F, N, M, d))]
            else:
                xt = msg.reshape(F, N * M, d)[:, graph.rev.reshape(-1)].reshape(F, N, M, d)
                parts = [xt]
                if not sh.species_as_first_message:
                    parts.append(np.broadcast_to(w[f"{p}.emb_n"][sp_n][None], (F, N, M, d)))
            parts.append(er)
            cat = np.concatenate(parts, axis=-1)
            tok, c["comp"] = _mlp2(w, f"{p}.comp", cat)
            central = np.broadcast_to(w[f"{p}.emb_c"][sp][None], (F, N, d))
            if sh.use_attribute_channel:
                a_c = np.broadcast_to(graph.attribute[None, :, None], (F, N, 1))
                ce_pre, c["cpos"] = L.linear_fwd(a_c, w[f"{p}.cpos.W"], w[f"{p}.cpos.b"])
                ce, c["cpos_act"] = L.silu_fwd(ce_pre)
                central, c["ccomp"] = _mlp2(w, f"{p}.ccomp", np.concatenate([central, ce], axis=-1))
            x = np.concatenate([central[:, :, None, :], tok], axis=2).reshape(B, T, d)
            c["tl"] = []
            for t in range(sh.n_tl):
                q = f"{p}.tl{t}"
                ct = {}
                xn, ct["ln1"] = L.layernorm_fwd(x, w[f"{q}.ln1.ln_g"], w[f"{q}.ln1.ln_b"])
                att, ct["attn"] = L.gated_attention_fwd(
                    xn, w[f"{q}.attn.Wq"], w[f"{q}.attn.Wk"], w[f"{q}.attn.Wv"],
                    w[f"{q}.attn.Wo"], w[f"{q}.attn.bo"], gate_tok, sh.n_heads,
                )
                x = x + att
                xn2, ct["ln2"] = L.layernorm_fwd(x, w[f"{q}.ln2.ln_g"], w[f"{q}.ln2.ln_b"])
                ff, ct["ffn"] = _mlp2(w, f"{q}.ffn", xn2)
                x = x + ff
                c["tl"].append(ct)
            y = x.reshape(F, N, T, d)
            yc, c["hc"] = _mlp2(w, f"{p}.hc", y[:, :, 0])
            yn, c["hn"] = _mlp2(w, f"{p}.hn", y[:, :, 1:])
            bond = np.sum(yn * gate[..., None], axis=2)
            if sh.bond_mode == "average":
                denom = np.where(gsum > 0, gsum, 1.0)[..., None]
                bond = bond / denom
            out = out + yc + bond
            msg = y[:, :, 1:] if xt is None else y[:, :, 1:] + xt
            caches.append(c)
        if keep_cache:
            cache = dict(caches=caches, gate=gate, gsum=gsum, sp=sp, sp_n=sp_n, F=F, N=N, M=M, graph=graph)
            return out, cache
        return out

    def backward(self, cache, d_out, weights=None) -> np.ndarray:
        """Gradient of ``sum(d_out * per_atom)`` with respect to the flat weights."""
        sh = self.shape
        flat = self.weights if weights is None else weights
        w = self.layout.views(flat)
        grad = np.zeros_like(flat)
        g = self.layout.views(grad)
        F, N, M = cache["F"], cache["N"], cache["M"]
        d = sh.d_pet
        T = M + 1
        B = F * N
        gate, gsum, sp, sp_n = cache["gate"], cache["gsum"], cache["sp"], cache["sp_n"]
        rev = cache["graph"].rev.reshape(-1)
        d_msg = None
        for k in reversed(range(sh.n_gnn)):
            p = f"b{k}"
            c = cache["caches"][k]
            dy = np.zeros((F, N, T, d))
            dyc = d_out
            _ = _mlp2_back(w, g, f"{p}.hc", dyc, c["hc"])
            dy[:, :, 0] = _
            dbond = d_out
            if sh.bond_mode == "average":
                dbond = dbond / np.where(gsum > 0, gsum, 1.0)[..., None]
            dyn = dbond[:, :, None, :] * gate[..., None]
            dy[:, :, 1:] = _mlp2_back(w, g, f"{p}.hn", dyn, c["hn"])
            has_xt = k > 0 or sh.species_as_first_message
            d_xt = None
            if d_msg is not None:
                dy[:, :, 1:] += d_msg
                if has_xt:
                    d_xt = d_msg.copy()
            dx = dy.reshape(B, T, d)
            for t in reversed(range(sh.n_tl)):
                q = f"{p}.tl{t}"
                ct = c["tl"][t]
                d_ff_in = _mlp2_back(w, g, f"{q}.ffn", dx, ct["ffn"])
                dxn2, dg2, db2 = L.layernorm_bwd(d_ff_in, ct["ln2"], w[f"{q}.ln2.ln_g"])
                g[f"{q}.ln2.ln_g"] += dg2
                g[f"{q}.ln2.ln_b"] += db2
                dx = dx + dxn2
                dxn, dWq, dWk, dWv, dWo, dbo = L.gated_attention_bwd(
                    dx, ct["attn"], w[f"{q}.attn.Wq"], w[f"{q}.attn.Wk"], w[f"{q}.attn.Wv"],
                    w[f"{q}.attn.Wo"], sh.n_heads,
                )
                g[f"{q}.attn.Wq"] += dWq
                g[f"{q}.attn.Wk"] += dWk
                g[f"{q}.attn.Wv"] += dWv
                g[f"{q}.attn.Wo"] += dWo
                g[f"{q}.attn.bo"] += dbo
                dxn1, dg1, db1 = L.layernorm_bwd(dxn, ct["ln1"], w[f"{q}.ln1.ln_g"])
                g[f"{q}.ln1.ln_g"] += dg1
                g[f"{q}.ln1.ln_b"] += db1
                dx = dx + dxn1
            dx = dx.reshape(F, N, T, d)
            d_central = dx[:, :, 0]
            if sh.use_attribute_channel:
                d_cat_c = _mlp2_back(w, g, f"{p}.ccomp", d_central, c["ccomp"])
                d_central = d_cat_c[..., :d]
                d_ce = L.silu_bwd(d_cat_c[..., d:], c["cpos_act"])
                _, dW, db = L.linear_bwd(d_ce, c["cpos"], w[f"{p}.cpos.W"])
                g[f"{p}.cpos.W"] += dW
                g[f"{p}.cpos.b"] += db
            np.add.at(g[f"{p}.emb_c"], sp, d_central.sum(0))
            d_cat = _mlp2_back(w, g, f"{p}.comp", dx[:, :, 1:], c["comp"])
            off = 0
            d_in_xt = None
            if k == 0:
                if sh.species_as_first_message:
                    d_in_xt = d_cat[..., :d]
                else:
                    np.add.at(g[f"{p}.emb_n"], sp_n, d_cat[..., :d].sum(0))
                off = d
            else:
                d_in_xt = d_cat[..., :d]
                off = d
                if not sh.species_as_first_message:
                    np.add.at(g[f"{p}.emb_n"], sp_n, d_cat[..., d:2 * d].sum(0))
                    off = 2 * d
            d_er = d_cat[..., off:]
            d_er_pre = L.silu_bwd(d_er, c["pos_act"])
            _, dW, db = L.linear_bwd(d_er_pre, c["pos"], w[f"{p}.pos.W"])
            g[f"{p}.pos.W"] += dW
            g[f"{p}.pos.b"] += db
            if d_xt is not None:
                d_in_xt = d_xt if d_in_xt is None else d_in_xt + d_xt
            if k == 0:
                if sh.species_as_first_message and d_in_xt is not None:
                    mask = cache["graph"].mask
                    np.add.at(g[f"{p}.emb_n"], sp_n, d_in_xt.sum(0) * mask[..., None])
                d_msg = None
            else:
                # xt = msg_prev[:, rev]  ->  scatter back onto the previous block's messages
                dm = np.zeros((F, N * M, d))
                np.add.at(dm, (slice(None), rev), d_in_xt.reshape(F, N * M, d))
                d_msg = dm.reshape(F, N, M, d)
        return grad

    # -- convenience --------------------------------------------------------

    def per_atom(self, s_or_graph, disp=None) -> np.ndarray:
        graph = s_or_graph if isinstance(s_or_graph, PaddedGraph) else self.graph(s_or_graph)
        out = self.forward(graph, disp)
        return out[..., 0] if self.shape.output == "scalar" else out

    def evaluate_graph(self, graph: PaddedGraph, rotations=None):
        """Evaluate in each frame. Returns ``(values (K, ...), per_atom (K, N, ...))``."""
        disp = graph.disp[None] if rotations is None else graph.rotated_disp(rotations)
        pa = self.per_atom(graph, disp)
        return pa.sum(1), pa

    def __call__(self, s: Structure) -> Prediction:
        vals, pa = self.evaluate_graph(self.graph(s))
        return Prediction(self.kind, vals[0], pa[0])

    def energy_and_grad(self, graph: PaddedGraph, d_energy: np.ndarray):
        """Per-structure energies of a (union) graph and the parameter gradient of
        ``sum(d_energy * energies)``."""
        out, cache = self.forward(graph, keep_cache=True)
        owner = graph.owner
        energies = np.zeros(graph.n_structures)
        np.add.at(energies, owner, out[0, :, 0])
        d_out = np.zeros_like(out)
        d_out[0, :, 0] = np.asarray(d_energy)[owner]
        return energies, self.backward(cache, d_out)

    def structure_energies(self, graph: PaddedGraph, disp=None) -> np.ndarray:
        out = self.forward(graph, disp)
        F = out.shape[0]
        e = np.zeros((F, graph.n_structures))
        for f in range(F):
            np.add.at(e[f], graph.owner, out[f, :, 0])
        return e


def pet2body(shape: PetShape, seed: int = 0) -> PetModel:
    """Rotation-invariant auxiliary: the position encoder only sees |r_ij|."""
    from dataclasses import replace

    return PetModel.create(replace(shape, two_body=True, output="scalar"), seed)

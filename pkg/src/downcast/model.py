"""Forecasting architecture: encoder, recurrent temporal pyramid, coarsened
spatial propagation, scale attention and multistep readout.

The design is time-then-space. Every node's window is encoded step by step,
run through gated recurrent layers that decimate the sequence between layers,
and the per-layer summaries are then propagated over a precomputed hierarchy
of coarsened graphs. Each of the L*(K+1) resulting encodings captures one
(temporal scale, spatial scale) pair; a per-node softmax over learned scores
mixes them into the representation the decoder maps to the forecasts.

The slot order of the multiscale encodings is spatial-major: slot k*L + (l-1)
holds temporal layer l at spatial level k.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .errors import ContractError, DimensionError
from .graphs import CoarseningHierarchy, temporal_chain
from .rng import stream_rng
from .sparse import CsrMatrix, tile_block_diag

SMP_VARIANTS = ("isotropic", "anisotropic")


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    window: int
    horizon: int
    d_x: int = 1
    d_u: int = 0
    d_h: int = 64
    temporal_layers: int = 4  # L
    temporal_factor: int = 3  # d
    spatial_levels: int = 3  # K
    embedding_size: int = 32
    smp_variant: str = "isotropic"
    diffusion_hops: int = 2  # P, isotropic messages only
    decoder_hidden: tuple[int, ...] = (128, 128)
    per_step_attention: bool = False
    normalize_ascent: bool = False

    def __post_init__(self):
        if self.temporal_layers < 1 or self.temporal_factor < 1 or self.spatial_levels < 0:
            raise ContractError("temporal layers/factor must be >= 1 and spatial levels >= 0")
        for name in ("n_nodes", "window", "horizon", "d_x", "d_h", "embedding_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.d_u < 0 or self.diffusion_hops < 1:
            raise ContractError("d_u must be >= 0 and diffusion_hops >= 1")
        if self.smp_variant not in SMP_VARIANTS:
            raise ContractError(f"smp_variant must be one of {SMP_VARIANTS}")

    @property
    def n_scales(self) -> int:
        return self.temporal_layers * (self.spatial_levels + 1)

    def slot(self, spatial_level: int, temporal_layer: int) -> int:
        """Flat index of (spatial level k, temporal layer l) with l in 1..L."""
        return spatial_level * self.temporal_layers + (temporal_layer - 1)


@dataclass
class ForwardTrace:
    """Per-window record kept for interpretability export."""

    encodings: np.ndarray  # (S, N, d_h)
    alphas: np.ndarray  # (n_score_sets, N, S); one set per horizon step when per-step
    predictions: np.ndarray  # (H, N, d_x), scaled space

    def __post_init__(self):
        sums = self.alphas.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ContractError("attention rows must sum to 1")


@dataclass
class BatchForward:
    tape: Tape | None  # None when the pass was run without gradient recording
    preds: list[Tensor]  # H tensors of shape (B*N, d_x)
    slots: list[Tensor]  # S tensors of shape (B*N, d_h)
    alphas: list[Tensor]  # one (B*N, S) tensor per score set


# -- parameters -----------------------------------------------------------------


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, hierarchy: CoarseningHierarchy, seed: int) -> dict[str, Parameter]:
    """Create all trainable arrays in a fixed, named order.

    Weight matrices draw uniformly from +-1/sqrt(fan_in); node embeddings from
    +-0.1; biases start at zero.
    """
    if hierarchy.levels != config.spatial_levels:
        raise ContractError("hierarchy depth does not match the configured spatial levels")
    if hierarchy.graphs[0].n != config.n_nodes:
        raise DimensionError("hierarchy built over a different node count")
    rng = stream_rng(seed, "init")
    params: dict[str, Parameter] = {}

    def dense(name, d_in, d_out):
        params[name] = Parameter(name, _uniform(rng, (d_in, d_out), 1.0 / np.sqrt(d_in)))

    def bias(name, d_out):
        params[name] = Parameter(name, np.zeros((1, d_out)))

    params["embeddings"] = Parameter(
        "embeddings", _uniform(rng, (config.n_nodes, config.embedding_size), 0.1)
    )
    enc_in = 2 * config.d_x + config.d_u + config.embedding_size
    dense("encoder.weight", enc_in, config.d_h)
    bias("encoder.bias", config.d_h)

    for layer in range(config.temporal_layers):
        for gate in ("reset", "update", "cand"):
            dense(f"temporal.l{layer}.{gate}.w_in", config.d_h, config.d_h)
            dense(f"temporal.l{layer}.{gate}.w_hid", config.d_h, config.d_h)
            bias(f"temporal.l{layer}.{gate}.bias", config.d_h)

    for k in range(1, config.spatial_levels + 1):
        prefix = f"spatial.k{k}"
        if config.smp_variant == "isotropic":
            for p in range(1, config.diffusion_hops + 1):
                dense(f"{prefix}.hop{p}.fwd", config.d_h, config.d_h)
                if hierarchy.graphs[k - 1].directed:
                    dense(f"{prefix}.hop{p}.rev", config.d_h, config.d_h)
        else:
            dense(f"{prefix}.msg.w1", 2 * config.d_h + 1, config.d_h)
            dense(f"{prefix}.msg.w2", config.d_h, config.d_h)
            dense(f"{prefix}.msg.w3", config.d_h, config.d_h)
        dense(f"{prefix}.self.weight", config.d_h, config.d_h)
        bias(f"{prefix}.self.bias", config.d_h)

    n_score_sets = config.horizon if config.per_step_attention else 1
    dense("attention.weight", config.d_h, n_score_sets)

    widths = [config.d_h, *config.decoder_hidden]
    for i, (d_in, d_out) in enumerate(zip(widths, widths[1:])):
        dense(f"readout.h{i}.weight", d_in, d_out)
        bias(f"readout.h{i}.bias", d_out)
    out_dim = config.d_x if config.per_step_attention else config.horizon * config.d_x
    dense("readout.out.weight", widths[-1], out_dim)
    bias("readout.out.bias", out_dim)
    return params


class _TapeParams:
    """Wraps each parameter at most once per tape."""

    def __init__(self, tape: Tape | None, params: dict[str, Parameter]):
        self._tape = tape
        self._params = params
        self._cache: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        t = self._cache.get(name)
        if t is None:
            if self._tape is None:
                t = Tensor(self._params[name].value)  # constant: nothing recorded
            else:
                t = self._tape.parameter(self._params[name])
            self._cache[name] = t
        return t


# -- compiled constants ------------------------------------------------------------


class ModelRuntime:
    """Batch-tiled sparse operators derived from the hierarchy.

    A batch of B windows is processed as one block-diagonal graph over B*N
    nodes; per-window results are bit-identical to running windows one by one
    because every row of every product depends only on its own window's block.
    """

    def __init__(self, hierarchy: CoarseningHierarchy, config: ModelConfig, batch_size: int):
        self.batch_size = batch_size
        tile = lambda m: tile_block_diag(m, batch_size)
        self.reduce_ops: list[CsrMatrix] = []
        self.lift_ops: list[CsrMatrix] = []
        self.ascent_ops: list[CsrMatrix] = []
        self.iso_fwd: list[list[CsrMatrix]] = []
        self.iso_rev: list[list[CsrMatrix] | None] = []
        self.edge_src: list[CsrMatrix | None] = []
        self.edge_recv: list[CsrMatrix | None] = []
        self.edge_weight: list[np.ndarray | None] = []

        for k in range(1, config.spatial_levels + 1):
            sel = hierarchy.selections[k - 1]
            graph = hierarchy.graphs[k - 1]
            self.reduce_ops.append(tile(sel.reduce_op()))
            self.lift_ops.append(tile(sel.lift_op()))
            ascent = graph.csr.row_normalized() if config.normalize_ascent else graph.csr
            self.ascent_ops.append(tile(ascent))
            if config.smp_variant == "isotropic":
                fwd, rev = [], []
                for p in range(1, config.diffusion_hops + 1):
                    hop = graph.csr.power(p)
                    fwd.append(tile(hop.transpose().row_normalized()))
                    if graph.directed:
                        rev.append(tile(hop.row_normalized()))
                self.iso_fwd.append(fwd)
                self.iso_rev.append(rev if graph.directed else None)
                self.edge_src.append(None)
                self.edge_recv.append(None)
                self.edge_weight.append(None)
            else:
                srcs, recvs, weights = [], [], []
                for s, r, w in graph.edges():
                    srcs.append(s)
                    recvs.append(r)
                    weights.append(w)
                n_e = len(srcs)
                eye_rows = np.arange(n_e)
                src_op = CsrMatrix.from_entries(n_e, graph.n, eye_rows, srcs, np.ones(n_e))
                recv_op = CsrMatrix.from_entries(n_e, graph.n, eye_rows, recvs, np.ones(n_e))
                self.edge_src.append(tile(src_op))
                self.edge_recv.append(tile(recv_op))
                self.edge_weight.append(np.tile(np.asarray(weights)[:, None], (batch_size, 1)))
                self.iso_fwd.append([])
                self.iso_rev.append(None)


# -- forward pieces -----------------------------------------------------------------


def last_value_imputation(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Replace invalid entries with the last valid value in the window, else 0."""
    out = np.empty_like(x)
    last = np.zeros(x.shape[1:])
    for t in range(x.shape[0]):
        last = np.where(m[t] == 1.0, x[t], last)
        out[t] = last
    return out


def _gru_layer(seq: list[Tensor], p: _TapeParams, layer: int) -> list[Tensor]:
    prefix = f"temporal.l{layer}"
    w = {
        gate: (p[f"{prefix}.{gate}.w_in"], p[f"{prefix}.{gate}.w_hid"], p[f"{prefix}.{gate}.bias"])
        for gate in ("reset", "update", "cand")
    }
    h = ad.constant(np.zeros_like(seq[0].data))
    out = []
    for x_t in seq:
        r = ad.sigmoid(x_t @ w["reset"][0] + h @ w["reset"][1] + w["reset"][2])
        u = ad.sigmoid(x_t @ w["update"][0] + h @ w["update"][1] + w["update"][2])
        c = ad.tanh(x_t @ w["cand"][0] + ad.mul(r, h) @ w["cand"][1] + w["cand"][2])
        h = ad.add(ad.mul(u, h), ad.mul(ad.sub(1.0, u), c))
        out.append(h)
    return out


def smp_messages(x: Tensor, level: int, p: _TapeParams, config: ModelConfig, rt: ModelRuntime) -> Tensor:
    """One message-passing update on the graph below pooling level `level`."""
    prefix = f"spatial.k{level}"
    out = x @ p[f"{prefix}.self.weight"] + p[f"{prefix}.self.bias"]
    idx = level - 1
    if config.smp_variant == "isotropic":
        for hop, op in enumerate(rt.iso_fwd[idx], start=1):
            if op.nnz:
                out = out + ad.sparse_matmul(op, x) @ p[f"{prefix}.hop{hop}.fwd"]
        if rt.iso_rev[idx] is not None:
            for hop, op in enumerate(rt.iso_rev[idx], start=1):
                if op.nnz:
                    out = out + ad.sparse_matmul(op, x) @ p[f"{prefix}.hop{hop}.rev"]
        return out
    src_op, recv_op = rt.edge_src[idx], rt.edge_recv[idx]
    if src_op is None or src_op.n_rows == 0:
        return out
    x_recv = ad.sparse_matmul(recv_op, x)
    x_src = ad.sparse_matmul(src_op, x)
    feats = ad.concat_cols([x_recv, x_src, ad.constant(rt.edge_weight[idx])])
    m = ad.elu(feats @ p[f"{prefix}.msg.w1"]) @ p[f"{prefix}.msg.w2"]
    gated = ad.mul(ad.sigmoid(m @ p[f"{prefix}.msg.w3"]), m)
    return out + ad.sparse_matmul(recv_op, gated, transpose=True)


def _mlp(x: Tensor, p: _TapeParams, config: ModelConfig) -> Tensor:
    h = x
    for i in range(len(config.decoder_hidden)):
        h = ad.elu(h @ p[f"readout.h{i}.weight"] + p[f"readout.h{i}.bias"])
    return h @ p["readout.out.weight"] + p["readout.out.bias"]


class Model:
    """Bundles a configuration, a coarsening hierarchy and the parameters."""

    def __init__(
        self,
        config: ModelConfig,
        hierarchy: CoarseningHierarchy,
        params: dict[str, Parameter] | None = None,
        init_seed: int = 0,
    ):
        self.config = config
        self.hierarchy = hierarchy
        self.params = params if params is not None else init_params(config, hierarchy, init_seed)
        self._runtimes: dict[int, ModelRuntime] = {}

    def runtime(self, batch_size: int) -> ModelRuntime:
        rt = self._runtimes.get(batch_size)
        if rt is None:
            rt = ModelRuntime(self.hierarchy, self.config, batch_size)
            self._runtimes[batch_size] = rt
        return rt

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward --------------------------------------------------------------

    def encode_inputs(self, p: _TapeParams, xw, mw, uw, batch_size: int) -> list[Tensor]:
        """Per-step affine encoding of [imputed x, u, mask, node embedding]."""
        cfg = self.config
        w_len, m_rows = xw.shape[0], xw.shape[1]
        if xw.shape != (w_len, m_rows, cfg.d_x) or mw.shape != xw.shape:
            raise DimensionError("window arrays must be (W, B*N, d_x)")
        ximp = last_value_imputation(xw, mw)
        emb = p["embeddings"]
        if batch_size > 1:
            emb = ad.concat_rows([emb] * batch_size)
        weight, bias_t = p["encoder.weight"], p["encoder.bias"]
        seq = []
        for t in range(w_len):
            const_feats = ad.constant(np.concatenate([ximp[t], uw[t], mw[t]], axis=1))
            h = ad.concat_cols([const_feats, emb]) @ weight + bias_t
            seq.append(h)
        return seq

    def temporal_stack(self, p: _TapeParams, seq: list[Tensor]) -> list[Tensor]:
        """L per-layer summaries; each layer consumes the previous decimation."""
        cfg = self.config
        chain = temporal_chain(len(seq), cfg.temporal_factor, cfg.temporal_layers)
        z_list = []
        for layer in range(cfg.temporal_layers):
            out_seq = _gru_layer(seq, p, layer)
            z_list.append(out_seq[-1])
            seq = [out_seq[i] for i in chain[layer].kept_indices]
        return z_list

    def spatial_stack(self, p: _TapeParams, z_list: list[Tensor], rt: ModelRuntime) -> list[Tensor]:
        """All (spatial level, temporal layer) encodings, lifted back to level 0."""
        cfg = self.config
        slots: list[Tensor | None] = [None] * cfg.n_scales
        for l_idx, z in enumerate(z_list, start=1):
            slots[cfg.slot(0, l_idx)] = z
            r = z
            for k in range(1, cfg.spatial_levels + 1):
                msg = smp_messages(r, k, p, cfg, rt)
                r = ad.sparse_matmul(rt.reduce_ops[k - 1], msg)
                lifted = r
                for j in range(k, 0, -1):
                    lifted = ad.sparse_matmul(rt.lift_ops[j - 1], lifted)
                    lifted = ad.sparse_matmul(rt.ascent_ops[j - 1], lifted, transpose=True)
                slots[cfg.slot(k, l_idx)] = lifted
        return slots

    def attention_fuse(self, p: _TapeParams, slots: list[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
        """Softmax-weighted mixtures of the multiscale encodings, per node.

        Returns (score sets, fused representations); one entry per horizon
        step in per-step mode, otherwise a single shared entry.
        """
        cfg = self.config
        theta = p["attention.weight"]
        score_cols = [z @ theta for z in slots]
        n_sets = cfg.horizon if cfg.per_step_attention else 1
        alphas, fused = [], []
        for h in range(n_sets):
            if cfg.per_step_attention:
                scores = ad.concat_cols([ad.slice_cols(s, h, h + 1) for s in score_cols])
            else:
                scores = ad.concat_cols(score_cols)
            al = ad.softmax_rows(scores)
            z_mix = None
            for s, z in enumerate(slots):
                term = ad.mul(ad.slice_cols(al, s, s + 1), z)
                z_mix = term if z_mix is None else z_mix + term
            alphas.append(al)
            fused.append(z_mix)
        return alphas, fused

    def readout(self, p: _TapeParams, fused: list[Tensor]) -> list[Tensor]:
        """Map fused representations to H per-step predictions (scaled space)."""
        cfg = self.config
        if cfg.per_step_attention:
            return [_mlp(z, p, cfg) for z in fused]
        out = _mlp(fused[0], p, cfg)
        return [ad.slice_cols(out, h * cfg.d_x, (h + 1) * cfg.d_x) for h in range(cfg.horizon)]

    def forward_batch(
        self,
        xw: np.ndarray,
        mw: np.ndarray,
        uw: np.ndarray,
        batch_size: int,
        record_gradients: bool = True,
    ) -> BatchForward:
        """Run a batch folded along the node axis; see ModelRuntime for layout.

        With `record_gradients` off, parameters enter as constants and no tape
        is built; results are identical and the pass is cheaper (evaluation,
        finite differences).
        """
        rt = self.runtime(batch_size)
        tape = Tape() if record_gradients else None
        p = _TapeParams(tape, self.params)
        seq = self.encode_inputs(p, xw, mw, uw, batch_size)
        z_list = self.temporal_stack(p, seq)
        slots = self.spatial_stack(p, z_list, rt)
        alphas, fused = self.attention_fuse(p, slots)
        preds = self.readout(p, fused)
        return BatchForward(tape=tape, preds=preds, slots=slots, alphas=alphas)

    def forward_window(self, x: np.ndarray, m: np.ndarray, u: np.ndarray) -> ForwardTrace:
        """Single-window forward returning the interpretability trace."""
        bf = self.forward_batch(x, m, u, batch_size=1, record_gradients=False)
        return ForwardTrace(
            encodings=np.stack([t.data for t in bf.slots]),
            alphas=np.stack([a.data for a in bf.alphas]),
            predictions=np.stack([t.data for t in bf.preds]),
        )

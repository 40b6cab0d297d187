"""Self-monitoring decoder: co-grounding, action scoring and progress estimation.

All step functions work on a batch of B episodes. Direction slot 0 is the
STOP pseudo-direction; padded slots are masked out of every softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import ModelConfig
from .encoder import InstructionEncoding, encode_instruction, positional_encoding
from .numcore import BatchNormState, ContractError, ParameterSet, Tensor


def init_params(cfg: ModelConfig, seed: int = 0) -> ParameterSet:
    rng = np.random.default_rng(seed)
    ps = ParameterSet()

    def uniform(name, shape, fan):
        k = 1.0 / np.sqrt(fan)
        ps.add(name, rng.uniform(-k, k, shape))

    def lstm(prefix, d_in, d_h):
        uniform(f"{prefix}.W", (d_in + d_h, 4 * d_h), d_h)
        b = rng.uniform(-1 / np.sqrt(d_h), 1 / np.sqrt(d_h), 4 * d_h)
        b[d_h:2 * d_h] = 1.0
        ps.add(f"{prefix}.b", b)

    ps.add("enc.embed", rng.normal(0.0, 1.0, (cfg.vocab_size, cfg.d_emb)))
    lstm("enc.lstm", cfg.d_emb, cfg.d_x)
    if cfg.use_bn:
        ps.add("g.bn1.gamma", np.ones(cfg.d_v))
        ps.add("g.bn1.beta", np.zeros(cfg.d_v))
    uniform("g.fc.W", (cfg.d_v, cfg.d_g), cfg.d_v)
    uniform("g.fc.b", (cfg.d_g,), cfg.d_v)
    if cfg.use_bn:
        ps.add("g.bn2.gamma", np.ones(cfg.d_g))
        ps.add("g.bn2.beta", np.zeros(cfg.d_g))
    uniform("W_x", (cfg.d_h, cfg.d_x), cfg.d_h)
    uniform("b_x", (cfg.d_x,), cfg.d_h)
    uniform("W_v", (cfg.d_h, cfg.d_g), cfg.d_h)
    uniform("b_v", (cfg.d_g,), cfg.d_h)
    uniform("W_a", (cfg.d_h + cfg.d_x, cfg.d_g), cfg.d_h + cfg.d_x)
    uniform("b_a", (cfg.d_g,), cfg.d_h + cfg.d_x)
    lstm("dec.lstm", cfg.d_x + cfg.d_g + cfg.d_a, cfg.d_h)
    uniform("act.W", (cfg.d_g, cfg.d_a), cfg.d_g)
    uniform("act.b", (cfg.d_a,), cfg.d_g)
    ps.add("act.start", rng.normal(0.0, 0.1, cfg.d_a))
    uniform("W_h", (cfg.d_h + cfg.d_g, cfg.d_h), cfg.d_h + cfg.d_g)
    uniform("b_h", (cfg.d_h,), cfg.d_h + cfg.d_g)
    uniform("W_pm", (cfg.l_max + cfg.d_h, 1), cfg.l_max + cfg.d_h)
    uniform("b_pm", (1,), cfg.l_max + cfg.d_h)
    return ps


def init_bn(cfg: ModelConfig) -> dict[str, BatchNormState]:
    if not cfg.use_bn:
        return {}
    return {"g.bn1": BatchNormState(cfg.d_v), "g.bn2": BatchNormState(cfg.d_g)}


@dataclass
class Observation:
    feats: np.ndarray   # (B, K1, d_v); slot 0 is STOP
    valid: np.ndarray   # (B, K1) bool: selectable slots
    targets: np.ndarray  # (B, K1) viewpoint id per slot, -1 for STOP/padding

    @property
    def k(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def stack_observations(graphs, viewpoints, k_max: int) -> Observation:
    """Gather the panoramic observations of B (graph, viewpoint) pairs."""
    B = len(viewpoints)
    d_v = graphs[0].features.d_v
    k1 = k_max + 1
    feats = np.zeros((B, k1, d_v))
    valid = np.zeros((B, k1), dtype=bool)
    targets = np.full((B, k1), -1, dtype=np.int64)
    for b, (g, u) in enumerate(zip(graphs, viewpoints)):
        obs = g.observation(u)
        feats[b, :len(obs)] = obs
        valid[b, :len(obs)] = True
        targets[b, 1:len(obs)] = g.neighbors(u)
    return Observation(feats, valid, targets)


@dataclass
class AgentState:
    h: Tensor
    c: Tensor
    prev_action: Tensor
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    p_pm: np.ndarray | None = None

    def select(self, rows) -> "AgentState":
        rows = np.asarray(rows)
        pick = (lambda a: None if a is None else a[rows])
        return AgentState(Tensor(self.h.value[rows]), Tensor(self.c.value[rows]),
                          Tensor(self.prev_action.value[rows]), pick(self.alpha),
                          pick(self.beta), pick(self.p_pm))


@dataclass
class StepOutput:
    logits: Tensor      # (B, K1) masked action scores o
    log_p: Tensor       # (B, K1) log action distribution
    p: np.ndarray       # (B, K1)
    p_pm: Tensor        # (B,)
    alpha: Tensor       # (B, L_max)
    beta: Tensor        # (B, K1)
    x_hat: Tensor
    v_hat: Tensor
    proj: Tensor        # (B, K1, d_g) g-projected direction features
    h: Tensor
    c: Tensor


class Agent:
    def __init__(self, cfg: ModelConfig, params: ParameterSet | None = None,
                 bn: dict[str, BatchNormState] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.bn = bn if bn is not None else init_bn(cfg)

    # -- pieces ---------------------------------------------------------
    def encode(self, tokens, training: bool = False, rng=None) -> InstructionEncoding:
        return encode_instruction(tokens, self.params, self.cfg, training, rng)

    def initial_state(self, batch: int) -> AgentState:
        d_h = self.cfg.d_h
        start = nc.mul(self.params["act.start"], Tensor(np.ones((batch, 1))))
        return AgentState(Tensor(np.zeros((batch, d_h))), Tensor(np.zeros((batch, d_h))), start)

    def project(self, obs: Observation, training: bool = False, rng=None,
                active: np.ndarray | None = None) -> Tensor:
        """The shared MLP g: [BN] -> FC -> [BN] -> dropout -> ReLU, per direction."""
        p = self.params
        B, K1, d_v = obs.feats.shape
        x = Tensor(obs.feats.reshape(B * K1, d_v))
        rows = obs.valid.copy()
        rows[:, 0] = False
        if active is not None:
            rows &= active[:, None]
        rows = rows.reshape(-1)
        if self.cfg.use_bn:
            x = nc.batchnorm(x, p["g.bn1.gamma"], p["g.bn1.beta"], self.bn["g.bn1"], training, rows)
        x = nc.linear(x, p["g.fc.W"], p["g.fc.b"])
        if self.cfg.use_bn:
            x = nc.batchnorm(x, p["g.bn2.gamma"], p["g.bn2.beta"], self.bn["g.bn2"], training, rows)
        x = nc.dropout(x, self.cfg.dropout, rng, training)
        x = nc.relu(x)
        return nc.reshape(x, (B, K1, self.cfg.d_g))

    def textual_grounding(self, h_prev, enc: InstructionEncoding) -> tuple[Tensor, Tensor]:
        if (enc.lengths < 1).any():
            raise ContractError("textual grounding over an empty instruction")
        p = self.params
        query = nc.linear(h_prev, p["W_x"], p["b_x"])
        z = nc.einsum("bld,bd->bl", positional_encoding(enc.X), query)
        alpha = nc.softmax(z, axis=-1, mask=enc.mask)
        x_hat = nc.einsum("bl,bld->bd", alpha, enc.X)
        return alpha, x_hat

    def visual_grounding(self, h_prev, proj: Tensor, valid: np.ndarray) -> tuple[Tensor, Tensor]:
        if (valid.sum(axis=1) < 1).any():
            raise ContractError("visual grounding with no directions")
        p = self.params
        query = nc.linear(h_prev, p["W_v"], p["b_v"])
        z = nc.einsum("bkd,bd->bk", proj, query)
        beta = nc.softmax(z, axis=-1, mask=valid)
        v_hat = nc.einsum("bk,bkd->bd", beta, proj)
        return beta, v_hat

    def decode_step(self, x_hat, v_hat, prev_action, h_prev, c_prev) -> tuple[Tensor, Tensor]:
        inp = nc.concat([x_hat, v_hat, prev_action], axis=-1)
        return nc.lstm_cell(inp, h_prev, c_prev, self.params["dec.lstm.W"], self.params["dec.lstm.b"])

    def action_scores(self, h, x_hat, proj: Tensor, valid: np.ndarray) -> tuple[Tensor, Tensor]:
        p = self.params
        query = nc.linear(nc.concat([h, x_hat], axis=-1), p["W_a"], p["b_a"])
        o = nc.einsum("bkd,bd->bk", proj, query)
        return o, nc.log_softmax(o, axis=-1, mask=valid)

    def progress_monitor(self, h_prev, c, v_hat, alpha) -> tuple[Tensor, Tensor]:
        p = self.params
        gate = nc.sigmoid(nc.linear(nc.concat([h_prev, v_hat], axis=-1), p["W_h"], p["b_h"]))
        h_pm = nc.mul(gate, nc.tanh(c))
        out = nc.tanh(nc.linear(nc.concat([alpha, h_pm], axis=-1), p["W_pm"], p["b_pm"]))
        return h_pm, nc.reshape(out, (out.shape[0],))

    def action_embedding(self, proj: Tensor, chosen: np.ndarray) -> Tensor:
        picked = nc.take_along(proj, chosen)
        return nc.linear(picked, self.params["act.W"], self.params["act.b"])

    # -- composition ----------------------------------------------------
    def step(self, state: AgentState, enc: InstructionEncoding, obs: Observation,
             training: bool = False, rng=None, active: np.ndarray | None = None) -> StepOutput:
        proj = self.project(obs, training, rng, active)
        alpha, x_hat = self.textual_grounding(state.h, enc)
        beta, v_hat = self.visual_grounding(state.h, proj, obs.valid)
        h, c = self.decode_step(x_hat, v_hat, state.prev_action, state.h, state.c)
        logits, log_p = self.action_scores(h, x_hat, proj, obs.valid)
        _, p_pm = self.progress_monitor(state.h, c, v_hat, alpha)
        return StepOutput(logits, log_p, np.exp(log_p.value), p_pm, alpha, beta,
                          x_hat, v_hat, proj, h, c)

    def advance(self, out: StepOutput, chosen: np.ndarray) -> AgentState:
        """State for the next step after taking direction ``chosen`` in each row."""
        return AgentState(out.h, out.c, self.action_embedding(out.proj, chosen),
                          out.alpha.value, out.beta.value, out.p_pm.value)

    def clone(self) -> "Agent":
        ps = ParameterSet()
        for k, v in self.params.items():
            ps.add(k, v.value.copy(), v.trainable)
        return Agent(self.cfg, ps, {k: s.copy() for k, s in self.bn.items()})

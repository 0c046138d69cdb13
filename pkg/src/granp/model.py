"""Graph-recurrent attentive neural process for trajectory prediction.

Pair embedding runs per-timestep graph attention over the scene graph and an
LSTM over the ego node's sequence.  Context futures are length-matched by an
interpolation layer, fused with the history features by two Conv-MLP encoders
(one per path), and consumed by a deterministic cross-attention path and a
latent Gaussian path.  The decoder emits per-step Gaussian distributions over
future positions; training maximizes the ELBO.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DataError, NumericError, ShapeError
from .layers import (ConvMlpEncoder, CrossAttention, GatLayer, LstmEncoder,
                     MlpBlock)
from .scene_graph import OccupancyGrid, build_adjacency, select_grid_nodes
from .data import T_F, T_N

LOG_2PI = math.log(2.0 * math.pi)

LATENT_SIGMA_MIN = 0.1
LATENT_SIGMA_SPAN = 0.9
DECODER_SIGMA_MIN = 0.01

STATE_FEATURES = 4      # x, y, s, a


@dataclass
class ModelConfig:
    """Architecture knobs.  The tested envelope is hidden in {16, 32, 64,
    128} and heads in {2, 4, 8}; smaller values work and keep finite
    difference checks cheap."""

    hidden: int = 64
    heads: int = 4
    gat_layers: int = 2
    latent: int = 0         # 0 -> same as hidden
    t_n: int = T_N
    t_f: int = T_F
    kernel: int = 3

    def __post_init__(self):
        if self.latent == 0:
            self.latent = self.hidden
        if self.hidden < 1 or self.heads < 1 or self.latent < 1:
            raise DataError(f"non-positive model dimensions in {self}")
        if self.hidden % self.heads != 0:
            raise DataError(f"hidden {self.hidden} not divisible by "
                            f"{self.heads} heads")
        if self.gat_layers != 2:
            raise DataError(f"gat_layers is fixed at 2, got {self.gat_layers}")


@dataclass
class PreparedScene:
    """A scene ready for the model: z-scored states stacked node-major, the
    RBF adjacency built from meter positions, and both flavors of future."""

    ids: tuple
    states: np.ndarray          # [t_n, n, 4], normalized
    adjacency: np.ndarray       # [n, n]
    future: np.ndarray | None   # [t_f, 2], normalized
    future_m: np.ndarray | None  # [t_f, 2], meters


@dataclass
class PreparedBatch:
    scenes: list
    m: int

    @property
    def context(self):
        return self.scenes[:self.m]


@dataclass
class LatentDistribution:
    """Diagonal Gaussian over the episode latent; sigma is bounded to
    [0.1, 1.0] by construction."""

    mu: Tensor      # [1, latent]
    sigma: Tensor   # [1, latent]

    @property
    def dim(self):
        return self.mu.shape[-1]


@dataclass
class PredictiveDistribution:
    """Per-step Gaussian prediction in meters, with sampled trajectories and
    the 95% band."""

    mean: np.ndarray        # [t_f, 2]
    std: np.ndarray         # [t_f, 2]
    ci_low: np.ndarray      # [t_f, 2]
    ci_high: np.ndarray     # [t_f, 2]
    samples: np.ndarray     # [S, t_f, 2] decoded means per latent draw


def prepare_scene(scene, stats, grid: OccupancyGrid | None = None) -> PreparedScene:
    """Order nodes (ego first), build the adjacency from meter positions,
    then z-score the states.  The graph must come from meters: the RBF
    bandwidth is a physical distance."""
    order = select_grid_nodes(scene, T_N - 1, grid)
    pos = np.stack([scene.history[v][T_N - 1, :2] for v in order])
    adj = build_adjacency(order, pos, grid)
    states = np.stack([stats.apply_states(scene.history[v]) for v in order],
                      axis=1)
    future = scene.future
    return PreparedScene(
        ids=tuple(order), states=states, adjacency=adj.matrix,
        future=None if future is None else stats.apply_xy(future),
        future_m=None if future is None else np.asarray(future))


def prepare_batch(episode, stats, grid: OccupancyGrid | None = None) -> PreparedBatch:
    return PreparedBatch(
        scenes=[prepare_scene(s, stats, grid) for s in episode.scenes],
        m=episode.m)


def kl_diag(posterior: LatentDistribution, prior: LatentDistribution) -> Tensor:
    """Closed-form KL(posterior || prior) between diagonal Gaussians."""
    if posterior.dim != prior.dim:
        raise ShapeError(f"kl_diag: dimensions {posterior.dim} vs {prior.dim}")
    for d in (posterior, prior):
        if not np.isfinite(d.sigma.data).all():
            raise NumericError("kl_diag: non-finite sigma")
        if not (d.sigma.data > 0).all():
            raise DataError("kl_diag: non-positive sigma")
    sq, sp = posterior.sigma, prior.sigma
    dmu = posterior.mu - prior.mu
    terms = ad.log(sp) - ad.log(sq) + (sq * sq + dmu * dmu) / (2.0 * sp * sp) - 0.5
    return terms.sum()


def sample_latent(dist: LatentDistribution, noise) -> Tensor:
    """Reparameterized draw z = mu + sigma * noise; gradients reach mu and
    sigma."""
    noise = np.asarray(noise)
    if noise.size != dist.dim:
        raise ShapeError(f"sample_latent: noise size {noise.size}, latent "
                         f"dim {dist.dim}")
    eps = ad.constant(noise.reshape(1, dist.dim))
    return dist.mu + dist.sigma * eps


class GranpModel:

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, lat = config.hidden, config.latent
        self.embed = MlpBlock("embed", [STATE_FEATURES, d], rng)
        self.gat = [GatLayer(f"gat{i}", d, d, config.heads, rng)
                    for i in range(config.gat_layers)]
        self.lstm = LstmEncoder("lstm", d, d, rng)
        self.interp = MlpBlock("interp", [config.t_f, config.t_n], rng)
        self.enc_det = ConvMlpEncoder("det", d + 2, d, d, config.kernel, rng)
        self.enc_lat = ConvMlpEncoder("lat", d + 2, d, d, config.kernel, rng)
        self.latent_mlp = MlpBlock("latent", [d, d, 2 * lat], rng)
        self.cross = CrossAttention("cross", d, config.heads, rng)
        self.decoder = MlpBlock(
            "decoder", [2 * d + lat, 2 * d, 2 * d, 4 * config.t_f], rng)

    def parameters(self):
        params = list(self.embed.parameters())
        for g in self.gat:
            params += g.parameters()
        params += self.lstm.parameters()
        params += self.interp.parameters()
        params += self.enc_det.parameters()
        params += self.enc_lat.parameters()
        params += self.latent_mlp.parameters()
        params += self.cross.parameters()
        params += self.decoder.parameters()
        return params

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    # -- pair embedding ----------------------------------------------------

    def _stack(self, scenes):
        """Block-diagonal batching: one graph pass covers every scene."""
        cfg = self.config
        for sc in scenes:
            if sc.states.shape[0] != cfg.t_n or sc.states.shape[2] != STATE_FEATURES:
                raise DataError(f"scene states {sc.states.shape}, expected "
                                f"[{cfg.t_n}, n, {STATE_FEATURES}]")
        sizes = [sc.states.shape[1] for sc in scenes]
        states = np.concatenate([sc.states for sc in scenes], axis=1)
        total = states.shape[1]
        adj = np.zeros((total, total))
        ego_idx = np.empty(len(scenes), dtype=np.intp)
        off = 0
        for i, (sc, n) in enumerate(zip(scenes, sizes)):
            adj[off:off + n, off:off + n] = sc.adjacency
            ego_idx[i] = off    # ego is node 0 of its block
            off += n
        return states, adj, ego_idx

    def encode_pairs(self, scenes):
        """Per-timestep GAT over the stacked graph, then the LSTM over each
        ego sequence.  Returns (H [N, d], ego_seq [t_n, N, d], attention)."""
        states, adj, ego_idx = self._stack(scenes)
        h = self.embed.forward(ad.constant(states))
        attention = []
        for gat in self.gat:
            h, att = gat.forward_seq(h, adj)
            attention.append(att)
        ego_seq = ad.slice_(h, (slice(None), ego_idx))
        return self.lstm.encode(ego_seq), ego_seq, attention

    def pair_features(self, ego_seq: Tensor, futures: np.ndarray) -> Tensor:
        """Fuse history features with length-matched future positions:
        [B, d + 2, t_n] channels for the Conv-MLP encoders."""
        chan = ad.transpose(ego_seq, (1, 2, 0))                  # [B, d, t_n]
        y = ad.constant(np.transpose(futures, (0, 2, 1)))        # [B, 2, t_f]
        y_matched = self.interp.forward(y)                       # [B, 2, t_n]
        return ad.concat([chan, y_matched], axis=1)

    # -- paths ---------------------------------------------------------------

    def deterministic_path(self, h_target: Tensor, h_context: Tensor,
                           r_context: Tensor) -> Tensor:
        return self.cross.attend(h_target, h_context, r_context)

    def latent_path(self, s: Tensor) -> LatentDistribution:
        """Mean-pool pair representations, then map to (mu, sigma)."""
        if s.shape[0] == 0:
            raise DataError("latent_path: no pair representations")
        pooled = s.mean(axis=0, keepdims=True)
        raw = self.latent_mlp.forward(pooled)
        lat = self.config.latent
        mu = raw[:, :lat]
        sigma = LATENT_SIGMA_MIN + LATENT_SIGMA_SPAN * ad.sigmoid(raw[:, lat:])
        return LatentDistribution(mu=mu, sigma=sigma)

    def decode(self, h_target: Tensor, r_star: Tensor, z: Tensor):
        """(H_T, r*, z) -> per-step position Gaussians, normalized units.

        Returns (mu [k, t_f, 2], sigma [k, t_f, 2]) tensors.
        """
        cfg = self.config
        k = h_target.shape[0]
        if (h_target.shape[-1] != cfg.hidden or r_star.shape != h_target.shape
                or z.shape[-1] != cfg.latent):
            raise ShapeError(
                f"decode: got H_T {h_target.shape}, r* {r_star.shape}, "
                f"z {z.shape} for d={cfg.hidden}, latent={cfg.latent}")
        z_rows = z + ad.constant(np.zeros((k, cfg.latent)))
        out = self.decoder.forward(ad.concat([h_target, r_star, z_rows], axis=1))
        out = out.reshape((k, cfg.t_f, 4))
        mu = out[:, :, :2]
        sigma = DECODER_SIGMA_MIN + ad.softplus(out[:, :, 2:])
        return mu, sigma

    # -- training and prediction ----------------------------------------------

    def elbo_loss(self, batch: PreparedBatch, noise):
        """Negative ELBO per target pair per step, with diagnostics.

        loss = [sum of per-step Gaussian NLLs + KL(q(z|S_T) || q(z|S_C))]
               / (k * t_f), one reparameterized z draw per call.
        """
        scenes, m = batch.scenes, batch.m
        if any(sc.future is None for sc in scenes):
            raise DataError("elbo_loss: every target needs a future")
        k = len(scenes)
        h_all, ego_seq, _ = self.encode_pairs(scenes)
        futures = np.stack([sc.future for sc in scenes])
        feats = self.pair_features(ego_seq, futures)
        s_all = self.enc_lat.encode(feats)
        r_ctx = self.enc_det.encode(feats[:m])
        prior = self.latent_path(s_all[:m])
        posterior = self.latent_path(s_all)
        z = sample_latent(posterior, noise)
        r_star = self.deterministic_path(h_all, h_all[:m], r_ctx)
        mu, sigma = self.decode(h_all, r_star, z)

        y = ad.constant(futures)
        err = y - mu
        nll = 0.5 * LOG_2PI + ad.log(sigma) + (err * err) / (2.0 * sigma * sigma)
        nll_sum = nll.sum()
        kl = kl_diag(posterior, prior)
        denom = float(k * self.config.t_f)
        loss = (nll_sum + kl) / denom
        return loss, {"recon_nll": nll_sum.item() / denom, "kl": kl.item()}

    def predict(self, targets, context, stats, samples: int = 30, seed=0,
                noise=None, chunk_size: int = 32):
        """Decode S latent draws from the context prior and pool them.

        Pooled variance adds the decoder variance to the spread of the
        sampled means; the band is mean +/- 1.96 sigma per axis.  Outputs
        are de-normalized to meters via stats.
        """
        if not context:
            raise DataError("predict: empty context")
        if noise is None:
            if samples < 1:
                raise DataError(f"predict: samples must be >= 1, got {samples}")
            rng = np.random.default_rng(seed)
            noise = rng.standard_normal((samples, self.config.latent))
        noise = np.asarray(noise)
        if noise.ndim != 2 or noise.shape[1] != self.config.latent:
            raise ShapeError(f"predict: noise {noise.shape}, expected "
                             f"[S, {self.config.latent}]")
        if any(sc.future is None for sc in context):
            raise DataError("predict: context pairs need futures")
        # Scene graphs carry no cross-scene edges, so the context encodes
        # once and targets stream through in chunks of bounded memory.
        h_ctx, ego_ctx, _ = self.encode_pairs(list(context))
        feats = self.pair_features(ego_ctx,
                                   np.stack([sc.future for sc in context]))
        r_ctx = self.enc_det.encode(feats)
        prior = self.latent_path(self.enc_lat.encode(feats))

        results = []
        targets = list(targets)
        for start in range(0, len(targets), chunk_size):
            chunk = targets[start:start + chunk_size]
            h_t, _, _ = self.encode_pairs(chunk)
            r_star = self.deterministic_path(h_t, h_ctx, r_ctx)
            k = len(chunk)
            mus = np.empty((len(noise), k, self.config.t_f, 2))
            sig2 = np.zeros((k, self.config.t_f, 2))
            for i, eps in enumerate(noise):
                mu, sigma = self.decode(h_t, r_star, sample_latent(prior, eps))
                mus[i] = mu.data
                sig2 += np.square(sigma.data)
            pooled_mean = mus.mean(axis=0)
            pooled_sd = np.sqrt(sig2 / len(noise) + mus.var(axis=0))
            mean_m = stats.invert_xy(pooled_mean)
            sd_m = stats.scale_xy(pooled_sd)
            samples_m = stats.invert_xy(mus)
            results += [PredictiveDistribution(
                            mean=mean_m[j], std=sd_m[j],
                            ci_low=mean_m[j] - 1.96 * sd_m[j],
                            ci_high=mean_m[j] + 1.96 * sd_m[j],
                            samples=samples_m[:, j])
                        for j in range(k)]
        return results

    def attention_maps(self, scene: PreparedScene):
        """Per-layer attention over one scene: list of [heads, t_n, n, n]."""
        _, _, attention = self.encode_pairs([scene])
        return scene.ids, attention

"""scikit-learn style density-estimator wrapper."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import model as M
from . import tensor as T
from .train import TrainConfig, fit_params


def check_video(X, *, frame_size=None, channels=None, num_frames=None) -> np.ndarray:
    """Validate a batch of videos ``(n_sequences, T, N, N, C)`` of 0..255 intensities."""
    X = np.asarray(X)
    if X.ndim == 4:
        X = X[..., None]
    if X.ndim != 5:
        raise ValueError(f"expected videos shaped (n, T, N, N, C), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found an empty batch of videos")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"frames must be square, got {X.shape[2]}x{X.shape[3]}")
    if X.shape[4] not in (1, 3):
        raise ValueError(f"frames need 1 or 3 color channels, got {X.shape[4]}")
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError("intensities must be integers in 0..255")
    if X.min() < 0 or X.max() > 255:
        raise ValueError("intensities must lie in 0..255")
    for name, want, got in (("frame size", frame_size, X.shape[2]),
                            ("channel count", channels, X.shape[4]),
                            ("frame count", num_frames, X.shape[1])):
        if want is not None and want != got:
            raise ValueError(f"{name} {got} does not match the fitted value {want}")
    return X.astype(np.int64)


def check_cond(cond, X: np.ndarray, dim: int | None = None):
    if cond is None:
        return None
    c = np.asarray(cond, dtype=np.float64)
    if c.shape[:2] != X.shape[:2] or c.ndim != 3:
        raise ValueError(f"conditioning must be shaped {X.shape[:2]} + (D,), got {c.shape}")
    if dim is not None and c.shape[2] != dim:
        raise ValueError(f"conditioning has {c.shape[2]} features, model expects {dim}")
    return c


class VideoPixelNetwork(BaseEstimator):
    """Autoregressive video density model.

    ``kind="vpn"`` models every pixel given all earlier pixels of its frame
    and all earlier frames; ``kind="baseline"`` conditions each frame only
    on earlier frames. ``fit`` trains on random minibatches of ``X`` for
    ``n_steps`` RMSProp steps; the loss covers frames after the first
    ``context_frames`` of every sequence.
    """

    def __init__(self, kind="vpn", head="bernoulli", context_frames=4, encoder_blocks=2,
                 decoder_blocks=3, block_width=32, lstm_channels=32, top_channels=64,
                 block_kind="rmb", dilation=True, n_steps=400, batch_size=4,
                 learning_rate=1e-3, random_state=0):
        self.kind = kind
        self.head = head
        self.context_frames = context_frames
        self.encoder_blocks = encoder_blocks
        self.decoder_blocks = decoder_blocks
        self.block_width = block_width
        self.lstm_channels = lstm_channels
        self.top_channels = top_channels
        self.block_kind = block_kind
        self.dilation = dilation
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _make_config(self, X, cond) -> M.ModelConfig:
        return M.ModelConfig(
            kind=self.kind, frame_size=X.shape[2], color_channels=X.shape[4],
            encoder_blocks=self.encoder_blocks, decoder_blocks=self.decoder_blocks,
            block_width=self.block_width, lstm_channels=self.lstm_channels,
            top_channels=self.top_channels, head=self.head, dilation=self.dilation,
            block_kind=self.block_kind, cond_dim=0 if cond is None else cond.shape[2],
            context_frames=self.context_frames, num_frames=X.shape[1])

    def fit(self, X, y=None, cond=None):
        X = check_video(X)
        cond = check_cond(cond, X)
        config = self._make_config(X, cond)
        seed = 0 if self.random_state is None else int(self.random_state)
        rng = np.random.default_rng(seed)
        params = M.init_params(config, seed)

        def draw(batch):
            idx = rng.integers(0, len(X), size=batch)
            return X[idx], (None if cond is None else cond[idx])

        tc = TrainConfig(steps=self.n_steps, batch_size=self.batch_size,
                         learning_rate=self.learning_rate, seed=seed)
        self.history_ = fit_params(config, params, draw, tc)
        self.config_ = config
        self.params_ = params
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "VideoPixelNetwork":
        config, params = M.load_checkpoint(path)
        est = cls(kind=config.kind, head=config.head, context_frames=config.context_frames,
                  encoder_blocks=config.encoder_blocks, decoder_blocks=config.decoder_blocks,
                  block_width=config.block_width, lstm_channels=config.lstm_channels,
                  top_channels=config.top_channels, block_kind=config.block_kind,
                  dilation=config.dilation)
        est.config_, est.params_, est.history_ = config, params, []
        return est

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        M.save_checkpoint(path, self.config_, self.params_)

    def _frame_nll(self, X, cond):
        check_is_fitted(self, "params_")
        cfg = self.config_
        X = check_video(X, frame_size=cfg.frame_size, channels=cfg.color_channels,
                        num_frames=cfg.num_frames)
        cond = check_cond(cond, X, cfg.cond_dim or None)
        with T.no_grad():
            return M.frame_nll(self.params_, cfg, X, cond).data

    def score_samples(self, X, cond=None) -> np.ndarray:
        """Log-likelihood (nats, higher is better) of each sequence's predicted frames."""
        return -self._frame_nll(X, cond).sum(axis=1)

    def score(self, X, y=None, cond=None) -> float:
        return float(np.mean(self.score_samples(X, cond)))

    def nats_per_frame(self, X, cond=None) -> float:
        return float(self._frame_nll(X, cond).mean())

    def sample(self, X_context, n_frames=None, cond=None, random_state=None) -> np.ndarray:
        """Sample continuations of each context video; returns ``(n, n_frames, N, N, C)`` uint8."""
        check_is_fitted(self, "params_")
        cfg = self.config_
        X = check_video(X_context, frame_size=cfg.frame_size, channels=cfg.color_channels)
        n_frames = cfg.predicted_frames if n_frames is None else n_frames
        rng = np.random.default_rng(self.random_state if random_state is None else random_state)
        out = []
        for k, video in enumerate(X):
            c = None if cond is None else np.asarray(cond, dtype=np.float64)[k]
            frames, _ = M.sample_video(video, c, cfg, self.params_, n_frames, rng)
            out.append(frames)
        return np.stack(out)

    def predict(self, X, cond=None) -> np.ndarray:
        """Sampled continuation of the context part of each full-length sequence."""
        check_is_fitted(self, "params_")
        X = check_video(X)
        return self.sample(X[:, :self.config_.context_frames], cond=cond)

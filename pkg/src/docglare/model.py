"""Glare network, the U-Net-like comparison network and a naive Bayes baseline."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import DEFAULT_BINS, TENSOR_NAMES, FeatureStack
from .nn import (Concat, Conv2D, InstanceNorm, MaxPool2, ModelGraph, Node, ShapeError, Upsample2,
                 load_weights)

PARAM_BUDGET = 500_000
BRANCH_KERNELS = (1, 3, 3)
PREDICTOR_KERNELS = (3, 3, 3, 1)
UNET_STRIDE = 8
# published parameter total for the reference U-Net; see unet_param_report()
UNET_REPORTED_PARAMS = 323_489


class ConfigError(ValueError):
    pass


@dataclass
class GlareNetConfig:
    branch_widths: tuple[int, int, int] = (16, 24, 32)
    predictor_widths: tuple[int, int, int] = (96, 96, 64)
    bins: int = DEFAULT_BINS
    param_budget: int = PARAM_BUDGET

    def input_channels(self) -> dict[str, int]:
        return {name: (5 if name == "lum" else self.bins) for name in TENSOR_NAMES}

    def analytic_param_count(self) -> int:
        total = 0
        for cin in self.input_channels().values():
            widths = (cin,) + tuple(self.branch_widths)
            for k, a, b in zip(BRANCH_KERNELS, widths, widths[1:]):
                total += k * k * a * b + b
        widths = (5 * self.branch_widths[-1],) + tuple(self.predictor_widths) + (1,)
        for k, a, b in zip(PREDICTOR_KERNELS, widths, widths[1:]):
            total += k * k * a * b + b
        return total

    @classmethod
    def from_file(cls, path) -> "GlareNetConfig":
        """Parse ``key = value`` lines; tuples are comma separated, ``#`` starts a comment."""
        cfg = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in ("branch_widths", "predictor_widths"):
                vals = tuple(int(v) for v in value.split(","))
                if len(vals) != 3:
                    raise ConfigError(f"{path}:{lineno}: {key} needs 3 values")
                setattr(cfg, key, vals)
            elif key in ("bins", "param_budget"):
                setattr(cfg, key, int(value))
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        return cfg

    def to_text(self) -> str:
        return (f"branch_widths = {','.join(map(str, self.branch_widths))}\n"
                f"predictor_widths = {','.join(map(str, self.predictor_widths))}\n"
                f"bins = {self.bins}\n"
                f"param_budget = {self.param_budget}\n")


def build_glare_net(cfg: GlareNetConfig | None = None, seed: int = 0,
                    dtype=np.float32) -> ModelGraph:
    """Five feature-extraction branches feeding a four-layer predictor.

    Branch: InstanceNorm -> 1x1 -> 3x3 -> 3x3; predictor: 3x3 x3 -> 1x1 sigmoid.
    """
    cfg = cfg or GlareNetConfig()
    if cfg.analytic_param_count() > cfg.param_budget:
        raise ConfigError(f"{cfg.analytic_param_count()} parameters exceed the "
                          f"budget of {cfg.param_budget}")
    rng = np.random.default_rng(seed)
    nodes: list[Node] = []
    ends = []
    for name, cin in cfg.input_channels().items():
        nodes.append(Node(f"{name}.norm", InstanceNorm(), [name]))
        prev, width = f"{name}.norm", cin
        for i, (k, out) in enumerate(zip(BRANCH_KERNELS, cfg.branch_widths), 1):
            nodes.append(Node(f"{name}.conv{i}", Conv2D(width, out, k, "relu", rng, dtype), [prev]))
            prev, width = f"{name}.conv{i}", out
        ends.append(prev)
    nodes.append(Node("concat", Concat(), ends))
    prev, width = "concat", 5 * cfg.branch_widths[-1]
    outs = tuple(cfg.predictor_widths) + (1,)
    for i, (k, out) in enumerate(zip(PREDICTOR_KERNELS, outs), 1):
        act = "sigmoid" if i == len(PREDICTOR_KERNELS) else "relu"
        nodes.append(Node(f"predictor.conv{i}", Conv2D(width, out, k, act, rng, dtype), [prev]))
        prev, width = f"predictor.conv{i}", out
    graph = ModelGraph(nodes, cfg.input_channels())
    graph.config = cfg
    return graph


def config_from_state(state) -> GlareNetConfig:
    """Recover the layer widths of a glare net from its named weight tensors."""
    try:
        branch = tuple(int(state[f"lum.conv{i}.weight"].shape[3]) for i in (1, 2, 3))
        pred = tuple(int(state[f"predictor.conv{i}.weight"].shape[3]) for i in (1, 2, 3))
        bins = int(state["black_h.conv1.weight"].shape[2])
    except KeyError as exc:
        raise ConfigError(f"weights lack glare-net tensor {exc}") from None
    cfg = GlareNetConfig(branch, pred, bins)
    # a file that exists was already accepted once; do not re-apply the budget
    cfg.param_budget = max(PARAM_BUDGET, cfg.analytic_param_count())
    return cfg


def load_glare_net(path) -> ModelGraph:
    """Build a glare net shaped like the weights in ``path`` and load them."""
    state = load_weights(path)
    model = build_glare_net(config_from_state(state))
    model.load_state_dict(state)
    return model


def feature_feeds(fs: FeatureStack | list[FeatureStack]) -> dict[str, np.ndarray]:
    """Stack one or more (equally sized) feature stacks into graph inputs."""
    stacks = [fs] if isinstance(fs, FeatureStack) else list(fs)
    feeds = {}
    for name in TENSOR_NAMES:
        feeds[name] = np.stack([np.asarray(getattr(s, name), np.float32) for s in stacks])
    return feeds


def glare_forward(model: ModelGraph, fs: FeatureStack) -> np.ndarray:
    """Per-block glare probabilities, shape (rows, cols)."""
    feeds = feature_feeds(fs)
    for name, arr in feeds.items():
        if arr.shape[-1] != model.input_channels[name]:
            raise ShapeError(f"{name}: model expects {model.input_channels[name]} channels, "
                             f"features have {arr.shape[-1]}")
    return model.forward(feeds, keep_state=False)[0, :, :, 0]


def branch_kernels(model: ModelGraph) -> dict[str, tuple[int, ...]]:
    """Kernel sizes along each branch and the predictor, read from the graph."""
    out: dict[str, list[int]] = {}
    for nd in model.nodes:
        if isinstance(nd.layer, Conv2D):
            out.setdefault(nd.name.split(".")[0], []).append(nd.layer.k)
    return {k: tuple(v) for k, v in out.items()}


# --------------------------------------------------------------------------
# U-Net-like comparison network

# (name, layer kind, kernel, output channels, inputs)
UNET_TABLE = [
    (1, "norm", 1, 1, ["gray"]),
    (2, "conv", 3, 32, [1]),
    (3, "pool", 2, 32, [2]),
    (4, "conv", 3, 32, [3]),
    (5, "pool", 2, 32, [4]),
    (6, "conv", 3, 64, [5]),
    (7, "pool", 2, 64, [6]),
    (8, "conv", 3, 64, [7]),
    (9, "pool", 2, 64, [8]),
    (10, "conv", 3, 64, [9]),
    (11, "pool", 2, 64, [10]),
    (12, "conv", 3, 64, [11]),
    (13, "conv", 3, 128, [12]),
    (14, "up", 2, 128, [13]),
    (15, "conv", 3, 128, [14, 9]),
    (16, "up", 2, 128, [15]),
    (17, "conv", 3, 128, [16, 7]),
    (18, "conv", 3, 1, [17]),
]


def build_unet(seed: int = 0, dtype=np.float32) -> ModelGraph:
    """The 18-layer encoder/decoder; output is 1/8 of the input resolution."""
    rng = np.random.default_rng(seed)
    nodes, ch = [], {"gray": 1}
    for idx, kind, _k, out, inputs in UNET_TABLE:
        names = [i if isinstance(i, str) else f"L{i}" for i in inputs]
        cin = sum(ch[n] for n in names)
        if kind == "norm":
            layer = InstanceNorm()
        elif kind == "conv":
            act = "sigmoid" if idx == UNET_TABLE[-1][0] else "relu"
            layer = Conv2D(cin, out, 3, act, rng, dtype)
        elif kind == "pool":
            layer = MaxPool2()
        else:
            layer = Upsample2()
        ch[f"L{idx}"] = layer.out_channels(cin)
        nodes.append(Node(f"L{idx}", layer, names))
    return ModelGraph(nodes, {"gray": 1})


def unet_param_report(model: ModelGraph | None = None) -> dict:
    model = model or build_unet()
    count = model.param_count()
    return {"analytic": count, "reported": UNET_REPORTED_PARAMS,
            "difference": count - UNET_REPORTED_PARAMS}


def unet_forward(model: ModelGraph, gray) -> np.ndarray:
    """Probability map at 1/8 resolution for a gray image (H, W divisible by 32)."""
    g = np.asarray(gray, np.float32)
    h, w = g.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"U-Net input must be divisible by 32, got {h}x{w}")
    x = g.reshape((-1, h, w, 1))
    out = model.forward({"gray": x}, keep_state=False)[..., 0]
    return out.reshape(g.shape[:-2] + (h // 8, w // 8))


def unet_block_probabilities(prob_map: np.ndarray, block_size: int = 64) -> np.ndarray:
    """Average a 1/8-resolution map over each block's cells."""
    f = block_size // UNET_STRIDE
    h, w = prob_map.shape[-2:]
    rows, cols = h // f, w // f
    m = prob_map[..., :rows * f, :cols * f]
    return m.reshape(m.shape[:-2] + (rows, f, cols, f)).mean(axis=(-3, -1))


# --------------------------------------------------------------------------
# naive Bayes baseline

VAR_FLOOR = 1e-6


@dataclass
class NaiveBayesModel:
    means: np.ndarray       # (2, n_features); row 1 is glare
    variances: np.ndarray   # (2, n_features)
    priors: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))

    def log_joint(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, np.float64))
        ll = -0.5 * (np.log(2 * np.pi * self.variances)[None]
                     + (x[:, None, :] - self.means[None]) ** 2 / self.variances[None])
        return ll.sum(axis=-1) + np.log(self.priors)[None]


def nb_fit(features, labels) -> NaiveBayesModel:
    """Gaussian class-conditional fit on (n, 5) luminance features."""
    x = np.asarray(features, np.float64).reshape(-1, np.shape(features)[-1])
    y = np.asarray(labels).ravel().astype(bool)
    if x.shape[0] != y.shape[0]:
        raise ValueError("features and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("naive Bayes needs samples of both classes")
    means = np.stack([x[~y].mean(axis=0), x[y].mean(axis=0)])
    variances = np.maximum(np.stack([x[~y].var(axis=0), x[y].var(axis=0)]), VAR_FLOOR)
    priors = np.array([(~y).mean(), y.mean()])
    return NaiveBayesModel(means, variances, priors)


def nb_predict(model: NaiveBayesModel, features) -> np.ndarray:
    """Posterior probability of glare for each feature row."""
    x = np.asarray(features, np.float64)
    lead = x.shape[:-1]
    lj = model.log_joint(x.reshape(-1, x.shape[-1]))
    post = np.exp(lj[:, 1] - np.logaddexp(lj[:, 0], lj[:, 1]))
    return post.reshape(lead)


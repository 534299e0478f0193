"""Multi-scale sparse encoder/decoder used as the deep prior.

Each scale runs a base block: a stack of encoder blocks (strided 2x2x2
convolution then a 3x3x3 convolution, each followed by instance norm and leaky
ReLU) and a mirrored decoder (nearest upsampling, instance norm, 3x3x3 and
1x1x1 convolutions) with no skip connections, then a 1x1x1 projection to a
single TSDF channel.  Coarser scales run first; their prediction is upsampled
and concatenated with the next finer scale's noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tape as T
from .grid import DomainSet, GridError, SparseGrid, max_pool_occupancy, upsample_index

DEFAULT_ENCODERS = ((16, 32, 64, 128, 128), (16, 32, 64, 128), (16, 32))
NOISE_HIGH = 0.1


@dataclass
class NetworkConfig:
    encoder_sizes: tuple = DEFAULT_ENCODERS
    noise_channels: int = 32
    leaky_slope: float = T.LEAKY_SLOPE
    hierarchy: bool = True

    def __post_init__(self):
        self.encoder_sizes = tuple(tuple(int(c) for c in sizes) for sizes in self.encoder_sizes)
        if not self.encoder_sizes or any(len(s) == 0 for s in self.encoder_sizes):
            raise ValueError("every scale needs at least one encoder block")
        if self.noise_channels < 1:
            raise ValueError("noise_channels must be positive")

    @property
    def n_scales(self) -> int:
        return len(self.encoder_sizes) if self.hierarchy else 1

    @classmethod
    def shallow(cls, **kw) -> "NetworkConfig":
        """Single-scale two-block variant used in the depth ablation."""
        return cls(encoder_sizes=((16, 32),), hierarchy=False, **kw)

    def to_json(self) -> str:
        d = asdict(self)
        d["encoder_sizes"] = [list(s) for s in self.encoder_sizes]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_json(Path(path).read_text())


def decoder_sizes(encoder: tuple) -> list[int]:
    """Output width of decoder block j (1-based); block 1 keeps the first encoder width."""
    return [encoder[max(j - 1, 1) - 1] for j in range(1, len(encoder) + 1)]


def scale_param_count(encoder: tuple, in_channels: int) -> int:
    """Closed-form parameter count of one base block including its projection head."""
    total, c = 0, in_channels
    for e in encoder:
        total += 8 * c * e + e + 27 * e * e + e
        c = e
    dec = decoder_sizes(encoder)
    for j in range(len(encoder), 0, -1):
        out = dec[j - 1]
        total += 27 * c * out + out + out * out + out
        c = out
    return total + c + 1


# --------------------------------------------------------------------------
# noise


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def noise_values(coords: np.ndarray, channels: int, seed: int, scale: int) -> np.ndarray:
    """Uniform ``[0, 0.1)`` values that depend only on (seed, scale, coordinate, channel)."""
    coords = np.asarray(coords, dtype=np.uint64).reshape(-1, 3)
    with np.errstate(over="ignore"):
        key = (coords[:, 0] << np.uint64(42)) | (coords[:, 1] << np.uint64(21)) | coords[:, 2]
        base = _splitmix64(np.array([seed], dtype=np.uint64) * np.uint64(0x100000001B3) + np.uint64(scale))
        h = _splitmix64(key[:, None] ^ base)
        h = _splitmix64(h + np.arange(channels, dtype=np.uint64)[None, :] * np.uint64(0xD1B54A32D192ED03))
    u = (h >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.minimum(u * NOISE_HIGH, np.nextafter(NOISE_HIGH, 0.0))


def sample_noise(domain: DomainSet, seed: int, scale: int = 0, channels: int = 32) -> SparseGrid:
    return SparseGrid(domain, noise_values(domain.coords, channels, seed, scale))


# --------------------------------------------------------------------------
# per-domain plans


@dataclass
class ScalePlan:
    levels: list  # DomainSet per level, level 0 is the scale's input domain
    down: list  # ConvRule, level j-1 -> j (index j-1)
    conv: list  # ConvRule, 3x3x3 on level j (index j-1)
    up: list  # gather index, level j -> j-1 (index j-1)
    point: list  # pointwise ConvRule on level j-1 (index j-1)
    level0_conv: object = None  # 3x3x3 ConvRule on level 0
    cross_up: np.ndarray | None = None  # gather from the coarser scale's output


@dataclass
class NetPlan:
    domains: list  # input domain per scale, finest first
    scales: list = field(default_factory=list)


def scale_domains(fine: DomainSet, n_scales: int) -> list[DomainSet]:
    out = [fine]
    for _ in range(n_scales - 1):
        out.append(max_pool_occupancy(out[-1]))
    return out


class DeepPriorNet:
    """Parameters plus the architecture description; geometry lives in a :class:`NetPlan`."""

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0):
        self.config = config or NetworkConfig()
        self.seed = seed
        self.store = T.ParamStore()
        rng = np.random.default_rng(seed)
        cfg = self.config
        for s in range(cfg.n_scales):
            enc = cfg.encoder_sizes[s]
            c = self.in_channels(s)
            for j, e in enumerate(enc, start=1):
                T.init_conv(self.store, f"s{s}.enc{j}.down", 8, c, e, rng)
                T.init_conv(self.store, f"s{s}.enc{j}.conv", 27, e, e, rng)
                c = e
            dec = decoder_sizes(enc)
            for j in range(len(enc), 0, -1):
                T.init_conv(self.store, f"s{s}.dec{j}.conv3", 27, c, dec[j - 1], rng)
                T.init_conv(self.store, f"s{s}.dec{j}.conv1", 1, dec[j - 1], dec[j - 1], rng)
                c = dec[j - 1]
            T.init_conv(self.store, f"s{s}.head", 1, c, 1, rng)

    def in_channels(self, s: int) -> int:
        coarser = s < self.config.n_scales - 1
        return self.config.noise_channels + (1 if coarser else 0)

    @property
    def n_params(self) -> int:
        return self.store.size

    def expected_param_count(self) -> int:
        return sum(
            scale_param_count(self.config.encoder_sizes[s], self.in_channels(s))
            for s in range(self.config.n_scales)
        )

    def plan(self, fine_domain: DomainSet) -> NetPlan:
        """Derive per-scale and per-level domains and convolution rulebooks."""
        cfg = self.config
        if not len(fine_domain):
            raise GridError("empty completion domain")
        domains = scale_domains(fine_domain, cfg.n_scales)
        plan = NetPlan(domains)
        for s in range(cfg.n_scales):
            enc = cfg.encoder_sizes[s]
            levels = [domains[s]]
            down, conv, up, point = [], [], [], []
            for _ in enc:
                rule = T.make_rule(levels[-1], kernel=2, stride=2, padding=0)
                if not len(rule.out_domain):
                    raise GridError(f"scale {s} pools to an empty domain")
                down.append(rule)
                levels.append(rule.out_domain)
                conv.append(T.make_rule(levels[-1], kernel=3))
            for j in range(1, len(enc) + 1):
                up.append(upsample_index(levels[j], levels[j - 1]))
                point.append(T.make_rule(levels[j - 1], kernel=1))
            sp = ScalePlan(levels, down, conv, up, point, T.make_rule(levels[0], kernel=3))
            if s < cfg.n_scales - 1:
                sp.cross_up = upsample_index(domains[s + 1], domains[s])
            plan.scales.append(sp)
        return plan

    def noise(self, plan: NetPlan, seed: int) -> list[SparseGrid]:
        return [
            sample_noise(d, seed, s, self.config.noise_channels) for s, d in enumerate(plan.domains)
        ]

    def _block(self, tape: T.Tape, s: int, x: T.Node, sp: ScalePlan):
        slope = self.config.leaky_slope
        enc = self.config.encoder_sizes[s]
        p = tape.param
        h = x
        with tape.scoped(f"s{s}.encoder"):
            for j in range(1, len(enc) + 1):
                h = T.sparse_conv(h, p(f"s{s}.enc{j}.down.weight"), p(f"s{s}.enc{j}.down.bias"), sp.down[j - 1])
                h = T.leaky_relu(T.instance_norm(h), slope)
                h = T.sparse_conv(h, p(f"s{s}.enc{j}.conv.weight"), p(f"s{s}.enc{j}.conv.bias"), sp.conv[j - 1])
                h = T.leaky_relu(T.instance_norm(h), slope)
        bottleneck = h
        with tape.scoped(f"s{s}.decoder"):
            for j in range(len(enc), 0, -1):
                h = T.gather_rows(h, sp.up[j - 1])
                h = T.instance_norm(h)
                h = T.sparse_conv(h, p(f"s{s}.dec{j}.conv3.weight"), p(f"s{s}.dec{j}.conv3.bias"),
                                  self._dec_rule(sp, j))
                h = T.leaky_relu(T.instance_norm(h), slope)
                h = T.sparse_conv(h, p(f"s{s}.dec{j}.conv1.weight"), p(f"s{s}.dec{j}.conv1.bias"), sp.point[j - 1])
                h = T.leaky_relu(T.instance_norm(h), slope)
        penultimate = h
        with tape.scoped(f"s{s}.head"):
            out = T.sparse_conv(h, p(f"s{s}.head.weight"), p(f"s{s}.head.bias"), sp.point[0])
        return out, penultimate, bottleneck

    @staticmethod
    def _dec_rule(sp: ScalePlan, j: int) -> T.ConvRule:
        # deeper levels reuse the encoder's 3x3x3 rulebooks
        return sp.conv[j - 2] if j >= 2 else sp.level0_conv

    def forward(self, tape: T.Tape, plan: NetPlan, noise: list[SparseGrid]) -> "ForwardResult":
        n = self.config.n_scales
        if len(noise) < n:
            raise GridError("noise is missing scales")
        outputs: list = [None] * n
        penult: list = [None] * n
        bottlenecks: list = [None] * n
        prev = None
        for s in range(n - 1, -1, -1):
            sp = plan.scales[s]
            if noise[s].domain != plan.domains[s]:
                raise GridError(f"noise domain does not match the scale-{s} domain")
            with tape.scoped(f"s{s}.input"):
                x = tape.constant(noise[s].values)
                if prev is not None:
                    x = T.concat_channels(x, T.gather_rows(prev, sp.cross_up))
            outputs[s], penult[s], bottlenecks[s] = self._block(tape, s, x, sp)
            prev = outputs[s]
        return ForwardResult(outputs, penult, bottlenecks, plan)

    def predict(self, plan: NetPlan, noise: list[SparseGrid]) -> list[SparseGrid]:
        with T.Tape(self.store) as tape:
            res = self.forward(tape, plan, noise)
            return [SparseGrid(plan.domains[s], o.value) for s, o in enumerate(res.outputs)]


@dataclass
class ForwardResult:
    outputs: list  # tape nodes, f^(s) per scale
    penultimate: list
    bottlenecks: list
    plan: NetPlan

    def grid(self, s: int = 0) -> SparseGrid:
        return SparseGrid(self.plan.domains[s], self.outputs[s].value)


def build(config: NetworkConfig, domains: list[DomainSet], seed: int = 0):
    """Allocate a network and its plan for explicitly given per-scale domains."""
    net = DeepPriorNet(config, seed)
    expected = scale_domains(domains[0], config.n_scales)
    for s, d in enumerate(domains[: config.n_scales]):
        if d != expected[s]:
            raise GridError(f"scale-{s} domain is not the occupancy pooling of scale {s - 1}")
    return net, net.plan(domains[0])

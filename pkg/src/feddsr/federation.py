"""Federated rounds: broadcast, parallel local training, weighted aggregation.

Vehicles train on private copies of the broadcast parameters, each with a
random stream keyed by (master seed, round, vehicle id), and the server
reduces uploads in ascending vehicle-id order.  Results therefore depend only
on the seed and configuration, never on thread scheduling.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NonFiniteError, ProtocolError
from .model import SegNet, Adapter, build_adapters, build_network
from .objectives import LossWeights, objective
from .tensor import GradientTape, RngStream, Tensor

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedprox", "fedavgm")
SCHEDULES = ("constant", "inv-sqrt-T")

# stream keys
_SAMPLE_STREAM = 11
_LOCAL_STREAM = 12


@dataclass
class Architecture:
    in_channels: int
    width: int
    classes: int
    taps: tuple = ()
    adapter_hidden: bool = False
    ne_channels: int = None


@dataclass
class RoundConfig:
    local_epochs: int = 2
    batch_size: int = 16
    lr: float = 0.05
    lr_schedule: str = "constant"
    rounds: int = 1
    participation: float = 1.0
    algorithm: str = "fedavg"
    mu: float = 0.01
    beta: float = 0.9
    weights: LossWeights = None

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ConfigError(f"training.local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"training.batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"training.lr must be >= 0, got {self.lr}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"training.lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        if self.rounds < 1:
            raise ConfigError(f"training.rounds must be >= 1, got {self.rounds}")
        if not 0 < self.participation <= 1:
            raise ConfigError(f"training.participation must be in (0, 1], got {self.participation}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"training.algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.mu < 0:
            raise ConfigError(f"training.mu must be >= 0, got {self.mu}")
        if not 0 <= self.beta < 1:
            raise ConfigError(f"training.beta must be in [0, 1), got {self.beta}")

    def step_size(self):
        if self.lr_schedule == "inv-sqrt-T":
            return self.lr / math.sqrt(self.rounds)
        return self.lr


@dataclass
class VehicleState:
    id: int
    dataset: object
    size: int = 0

    def __post_init__(self):
        self.size = len(self.dataset)
        if self.size <= 0:
            raise ContractError(f"vehicle {self.id} has an empty dataset")


@dataclass
class Upload:
    vehicle: int
    theta: dict
    phi: dict
    size: int
    trace: list = field(default=None, repr=False)


@dataclass
class ServerState:
    t: int
    theta: dict
    phi: dict
    momentum: dict = None
    history: list = field(default_factory=list)  # aggregation weights per round

    def num_parameters(self):
        return sum(v.size for v in self.theta.values())


def _frozen(state):
    out = {}
    for k, v in state.items():
        a = np.array(v, copy=True)
        a.flags.writeable = False
        out[k] = a
    return out


def init_server(arch, seed, dtype=None):
    net = build_network(arch.in_channels, arch.width, arch.classes, seed, dtype)
    adapters = build_adapters(net, arch.taps, seed, arch.adapter_hidden, dtype)
    phi = {k: v.data for a in adapters for k, v in a.params.items()}
    return ServerState(0, _frozen(net.state()), _frozen(phi))


def instantiate(arch, theta, phi):
    """Fresh trainable network + adapters holding copies of the given state."""
    params = {k: Tensor(np.array(v, copy=True), requires_grad=True, name=k, dtype=v.dtype) for k, v in theta.items()}
    net = SegNet(arch.in_channels, arch.width, arch.classes, params)
    adapters = []
    for m, site in enumerate(arch.taps):
        pre = f"adapter{m}."
        ap = {k: Tensor(np.array(v, copy=True), requires_grad=True, name=k, dtype=v.dtype)
              for k, v in phi.items() if k.startswith(pre)}
        adapters.append(Adapter(m, net.site_channels(site), arch.classes, net.site_scale(site), ap))
    return net, adapters


def sample_participants(vehicle_ids, participation, seed, t):
    """Uniform sample without replacement of ceil(rho N) vehicles, id-sorted."""
    ids = sorted(vehicle_ids)
    if not ids:
        raise ContractError("cannot sample from an empty fleet")
    k = math.ceil(round(participation * len(ids), 9))
    if k < 1:
        raise ContractError(f"participation {participation} selects no vehicle out of {len(ids)}")
    if k >= len(ids):
        return ids
    rng = RngStream(seed, _SAMPLE_STREAM, t)
    chosen = rng.choice(len(ids), size=k, replace=False)
    return [ids[i] for i in sorted(chosen)]


def local_train(vehicle, theta, phi, cfg, arch, seed, t):
    """E epochs of minibatch SGD on the vehicle's data starting from the
    broadcast (theta, phi).  Returns an Upload with the final parameters and
    the per-batch loss breakdowns."""
    net, adapters = instantiate(arch, theta, phi)
    weights = cfg.weights or LossWeights.uniform(len(arch.taps), 0.0, 0.0)
    theta_p = net.parameters()
    phi_p = [p for a in adapters for p in a.parameters()]
    params = phi_p + theta_p
    n_phi = len(phi_p)
    dtype = theta_p[0].dtype
    lr = dtype.type(cfg.step_size())
    prox = cfg.algorithm == "fedprox" and cfg.mu > 0
    anchor = [theta[k] for k in net.params] if prox else None
    mu = dtype.type(cfg.mu)

    rng = RngStream(seed, _LOCAL_STREAM, t, vehicle.id)
    data = vehicle.dataset
    trace = []
    for epoch in range(cfg.local_epochs):
        order = rng.permutation(vehicle.size)
        for bi, lo in enumerate(range(0, vehicle.size, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            x = Tensor(data.images[idx], dtype=dtype)
            try:
                with GradientTape() as tape:
                    lb = objective(net, adapters, arch.taps, x, data.labels[idx], weights, arch.ne_channels)
                if not math.isfinite(lb.total):
                    raise NonFiniteError("non-finite total loss")
            except NonFiniteError as exc:
                raise NonFiniteError(f"vehicle {vehicle.id}, epoch {epoch}, batch {bi}: {exc}") from None
            grads = tape.backward(lb.tensor, params)
            rec = lb.summary()
            if prox:
                sq = 0.0
                for i, (p, a) in enumerate(zip(theta_p, anchor)):
                    diff = p.data - a
                    sq += float(np.sum(diff.astype(np.float64) ** 2))
                    grads[n_phi + i] = grads[n_phi + i] + mu * diff
                rec["prox"] = 0.5 * cfg.mu * sq
                rec["total"] += rec["prox"]
            rec["epoch"] = epoch
            rec["batch"] = bi
            trace.append(rec)
            # adapters first, then the network, both from this forward pass
            for p, g in zip(params, grads):
                p.data = p.data - lr * g
    return Upload(vehicle.id, net.state(), {k: v.data for a in adapters for k, v in a.params.items()},
                  vehicle.size, trace)


def aggregation_weights(uploads):
    total = sum(u.size for u in uploads)
    return {u.vehicle: u.size / total for u in sorted(uploads, key=lambda u: u.vehicle)}


def _weighted_sum(states, ws, reference, who):
    out = {}
    for k, ref in reference.items():
        acc = np.zeros(ref.shape, dtype=np.float64)
        for vid, st, w in zip(who, states, ws):
            arr = st.get(k)
            if arr is None or arr.shape != ref.shape:
                got = None if arr is None else list(arr.shape)
                raise ProtocolError(f"vehicle {vid}: parameter {k!r} has shape {got}, expected {list(ref.shape)}")
            acc += w * arr.astype(np.float64)
        out[k] = acc
    for vid, st in zip(who, states):
        extra = set(st) - set(reference)
        if extra:
            raise ProtocolError(f"vehicle {vid}: unexpected parameters {sorted(extra)}")
    return out


def aggregate(uploads, server, cfg):
    """Weighted average of uploads into the next global (theta, phi).

    For fedavgm the network parameters move by a server momentum step:
    v <- beta v + (theta_t - avg), theta_{t+1} = theta_t - v.
    """
    ups = sorted(uploads, key=lambda u: u.vehicle)
    if not ups:
        raise ContractError("no uploads to aggregate")
    wmap = aggregation_weights(ups)
    who = [u.vehicle for u in ups]
    ws = [wmap[v] for v in who]
    theta_avg = _weighted_sum([u.theta for u in ups], ws, server.theta, who)
    phi_avg = _weighted_sum([u.phi for u in ups], ws, server.phi, who)
    momentum = server.momentum
    if cfg.algorithm == "fedavgm":
        momentum = {}
        for k, cur in server.theta.items():
            prev = server.momentum[k] if server.momentum else 0.0
            v = cfg.beta * prev + (cur.astype(np.float64) - theta_avg[k])
            momentum[k] = v
            theta_avg[k] = cur.astype(np.float64) - v
    theta = {k: v.astype(server.theta[k].dtype) for k, v in theta_avg.items()}
    phi = {k: v.astype(server.phi[k].dtype) for k, v in phi_avg.items()}
    return theta, phi, momentum, wmap


@dataclass
class RoundLog:
    t: int
    participants: list
    weights: dict
    vehicles: dict  # vehicle id -> mean loss breakdown over its final local epoch
    wall_ms: float
    traces: dict = field(default_factory=dict, repr=False)  # vehicle id -> per-batch records
    extra: dict = field(default_factory=dict)


def _final_epoch_summary(trace, m):
    last = max(r["epoch"] for r in trace)
    rows = [r for r in trace if r["epoch"] == last]
    out = {"ce": float(np.mean([r["ce"] for r in rows])),
           "mi": [float(np.mean([r["mi"][j] for r in rows])) for j in range(m)],
           "ne": [float(np.mean([r["ne"][j] for r in rows])) for j in range(m)],
           "total": float(np.mean([r["total"] for r in rows]))}
    return out


def _call(hooks, name, *args):
    for h in hooks or ():
        fn = getattr(h, name, None)
        if fn is None and name == "after_round" and callable(h):
            fn = h
        if fn is not None:
            fn(*args)


def run_federation(fleet, arch, cfg, seed, hooks=None, threads=1, server=None, dtype=None):
    """Run ``cfg.rounds`` rounds of broadcast -> local training -> aggregation.

    ``hooks`` may define ``before_round(t, server)`` (called with the shared
    pre-round model) and ``after_round(t, server, round_log)``; a bare
    callable is treated as ``after_round``.  Hooks must not modify the server
    state (its arrays are read-only).
    """
    if cfg.rounds < 1:
        raise ContractError("need at least one round")
    if server is None:
        server = init_server(arch, seed, dtype)
    by_id = {v.id: v for v in fleet}
    logs = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(server.t, cfg.rounds):
            start = time.perf_counter()
            _call(hooks, "before_round", t, server)
            chosen = sample_participants(by_id, cfg.participation, seed, t)
            job = lambda vid: local_train(by_id[vid], server.theta, server.phi, cfg, arch, seed, t)
            uploads = list(pool.map(job, chosen)) if pool else [job(v) for v in chosen]
            theta, phi, momentum, wmap = aggregate(uploads, server, cfg)
            server = ServerState(t + 1, _frozen(theta), _frozen(phi), momentum, server.history + [wmap])
            rl = RoundLog(t + 1, chosen, wmap,
                          {u.vehicle: _final_epoch_summary(u.trace, len(arch.taps)) for u in uploads},
                          (time.perf_counter() - start) * 1000.0,
                          {u.vehicle: u.trace for u in uploads})
            _call(hooks, "after_round", t + 1, server, rl)
            logs.append(rl)
            log.debug("round %d done in %.0f ms", t + 1, rl.wall_ms)
    finally:
        if pool:
            pool.shutdown()
    return server, logs

"""Federated runs: reparameterize, distribute, train, merge, account.

The baseline run uploads every client's image files to the server and
trains there; its ledger total is exactly the sum of the on-disk byte
counts. The federated run factorizes the initial model once, broadcasts
the frozen right factors, then for each merge round exchanges only the
learnable set (left factors plus biases) with every client; its ledger
total is exactly ``K * (|R| + 2 * M * |C|)`` in serialized bytes.

Client execution is driven over channels, so in-process worker threads
and TCP client processes run the identical protocol and produce
bit-identical models. Per-client randomness is derived from
``hash(seed, client, round)``, which makes results independent of
scheduling.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .linalg import refactor_lstsq, select_rank, svd, truncate
from .net import Adam, FactorizedLayer, FactorizedParams, NetworkParams
from .radiance import (
    ClientDataset,
    PosedImage,
    RenderOptions,
    TrainOptions,
    make_task,
    sparse_train,
    train,
)
from .transport import (
    MessageKind,
    ParamMessage,
    QueueChannel,
    assemble_factorized,
    decode_frozen,
    decode_learnable,
    encode_frozen,
    encode_learnable,
    recv_message,
    send_message,
)

__all__ = [
    "MergeSchedule",
    "TransferRecord",
    "BandwidthLedger",
    "derive_seed",
    "parameterise",
    "recover",
    "combine",
    "combine_learnable",
    "refactorize",
    "compression_ratio",
    "federated_formula_bytes",
    "ClientWorker",
    "ClientHandles",
    "run_baseline",
    "run_fednerf",
    "start_inproc_clients",
    "run_baseline_local",
    "run_fednerf_local",
    "BaselineResult",
    "FederatedResult",
    "MODE_BASELINE",
    "MODE_FEDERATED",
]

MODE_BASELINE = 0
MODE_FEDERATED = 1


@dataclass(frozen=True)
class MergeSchedule:
    """Hyperparameters of one experiment: retained variance fraction,
    merge rounds, per-round client iterations, client count, and the
    centralized iteration budget."""

    alpha: float = 0.9
    merges: int = 20
    iters_per_merge: int = 100
    clients: int = 4
    baseline_iters: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.clients < 1 or self.merges < 1:
            raise ValueError("need at least one client and one merge round")
        # zero is allowed so a no-training run is a usable fixed-point check
        if self.iters_per_merge < 0 or self.baseline_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")


@dataclass(frozen=True)
class TransferRecord:
    direction: str  # "down" = server to client, "up" = client to server
    kind: MessageKind
    round: int
    client: int
    raw_bytes: int
    wire_bytes: int


class BandwidthLedger:
    """Per-transfer byte accounting; totals are sums over the records."""

    def __init__(self):
        self.records: list[TransferRecord] = []

    def add(self, direction: str, kind: MessageKind, round: int, client: int,
            raw_bytes: int, wire_bytes: int) -> None:
        self.records.append(TransferRecord(direction, kind, round, client,
                                           raw_bytes, wire_bytes))

    def _total(self, kinds, wire: bool = False) -> int:
        return sum((r.wire_bytes if wire else r.raw_bytes)
                   for r in self.records if r.kind in kinds)

    @property
    def total_raw(self) -> int:
        return self._total(set(MessageKind))

    @property
    def total_wire(self) -> int:
        return self._total(set(MessageKind), wire=True)

    @property
    def dataset_bytes(self) -> int:
        return self._total({MessageKind.DATASET})

    @property
    def param_bytes(self) -> int:
        return self._total({MessageKind.FROZEN, MessageKind.LEARNABLE,
                            MessageKind.DENSE})

    def summary_lines(self) -> list[str]:
        lines = [f"records = {len(self.records)}",
                 f"total_raw_bytes = {self.total_raw}",
                 f"total_wire_bytes = {self.total_wire}"]
        for kind in (MessageKind.DATASET, MessageKind.FROZEN, MessageKind.LEARNABLE):
            n = sum(1 for r in self.records if r.kind == kind)
            if n:
                lines.append(f"{kind.name.lower()}_transfers = {n}")
                lines.append(f"{kind.name.lower()}_raw_bytes = {self._total({kind})}")
        return lines


def derive_seed(seed: int, label: str, client: int = 0, round: int = 0) -> int:
    """Stable per-(client, round) seed so scheduling cannot change results."""
    digest = hashlib.sha256(f"fedray:{seed}:{label}:{client}:{round}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def federated_formula_bytes(clients: int, merges: int, frozen_bytes: int,
                            learnable_bytes: int) -> int:
    """Total federated transfer bytes: K * (|R| + 2 M |C|)."""
    return clients * (frozen_bytes + 2 * merges * learnable_bytes)


def compression_ratio(baseline_ledger: BandwidthLedger,
                      federated_ledger: BandwidthLedger, wire: bool = False) -> float:
    base = baseline_ledger.total_wire if wire else baseline_ledger.total_raw
    fed = federated_ledger.total_wire if wire else federated_ledger.total_raw
    return base / fed


# ---------------------------------------------------------------------------
# core algorithm steps

def parameterise(params: NetworkParams, alpha: float) -> FactorizedParams:
    """Factorize every FC layer at the rank retaining an ``alpha`` fraction
    of its cumulative singular-value mass; biases are copied unchanged."""
    def factor(layers):
        out = []
        for layer in layers:
            res = svd(layer.weight)
            rank = select_rank(res.singular, alpha)
            left, right = truncate(res, rank)
            out.append(FactorizedLayer(left, right, layer.bias.copy(), layer.tag))
        return out

    fine = factor(params.fine) if params.fine is not None else None
    return FactorizedParams(coarse=factor(params.coarse), fine=fine, arch=params.arch)


def recover(params: FactorizedParams) -> NetworkParams:
    """Materialize dense weights ``W = L @ R`` for every layer."""
    from .net import DenseLayer

    def densify(layers):
        return [DenseLayer(l.dense_weight(), l.bias.copy(), l.tag) for l in layers]

    fine = densify(params.fine) if params.fine is not None else None
    return NetworkParams(coarse=densify(params.coarse), fine=fine, arch=params.arch)


def _check_combinable(models, sizes):
    if len(models) != len(sizes) or not models:
        raise ValueError("need one size per model")
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ValueError("client data sizes must be positive")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch != arch:
            raise ValueError("cannot combine models with different architectures")
    return sizes


def _weighted_average(tensors, sizes: np.ndarray) -> np.ndarray:
    # normalize first so a single client (weight exactly 1.0) is an identity
    fractions = sizes / sizes.sum()
    acc = np.zeros_like(tensors[0])
    for w, t in zip(fractions, tensors):
        acc += w * t
    return acc


def combine(models: list[NetworkParams], sizes) -> NetworkParams:
    """Data-size-weighted average of dense weights and biases."""
    sizes = _check_combinable(models, sizes)
    merged = models[0].copy()
    for ours, theirs in zip(merged.all_layers(),
                            zip(*(m.all_layers() for m in models))):
        ours.weight = _weighted_average([l.weight for l in theirs], sizes)
        ours.bias = _weighted_average([l.bias for l in theirs], sizes)
    return merged


def combine_learnable(models: list[FactorizedParams], sizes) -> FactorizedParams:
    """Average the left factors and biases directly.

    Because the dense average is linear and every client shares the same
    frozen rights, this equals recover-combine-refactorize.
    """
    sizes = _check_combinable(models, sizes)
    merged = models[0].copy()
    for ours, theirs in zip(merged.all_layers(),
                            zip(*(m.all_layers() for m in models))):
        ours.left = _weighted_average([l.left for l in theirs], sizes)
        ours.bias = _weighted_average([l.bias for l in theirs], sizes)
    return merged


def refactorize(merged: NetworkParams, rights: list[np.ndarray]) -> FactorizedParams:
    """Extract left factors from a merged dense model by least squares."""
    layers = merged.all_layers()
    if len(layers) != len(rights):
        raise ValueError("one frozen right factor per layer required")
    fact = [FactorizedLayer(refactor_lstsq(layer.weight, right), right,
                            layer.bias.copy(), layer.tag)
            for layer, right in zip(layers, rights)]
    per_net = len(merged.arch.layer_dims())
    fine = fact[per_net:] if merged.arch.use_fine else None
    return FactorizedParams(coarse=fact[:per_net], fine=fine, arch=merged.arch)


# ---------------------------------------------------------------------------
# client side

def _pose_meta(img: PosedImage) -> bytes:
    vals = list(img.pose.ravel()) + [img.focal, img.cx, img.cy]
    return img.name.encode() + b"\x00" + struct.pack("<15d", *vals)


def _parse_pose_meta(meta: bytes):
    name, rest = meta.split(b"\x00", 1)
    vals = struct.unpack("<15d", rest)
    pose = np.array(vals[:12]).reshape(3, 4)
    return name.decode(), pose, vals[12], vals[13], vals[14]


class ClientWorker:
    """Client side of a run; identical over queues and TCP.

    Sends a hello declaring its dataset size, then follows the mode the
    server selects: stream image files up (baseline), or receive the
    frozen factors once and then train/return the learnable set every
    merge round. The Adam state persists across rounds even though the
    incoming learnable set overwrites the parameters.
    """

    def __init__(self, client_id: int, dataset: ClientDataset, arch,
                 schedule: MergeSchedule, render_options: RenderOptions,
                 train_options: TrainOptions, compress: bool = False):
        self.client_id = client_id
        self.dataset = dataset
        self.arch = arch
        self.schedule = schedule
        self.render_options = render_options
        self.train_options = train_options
        self.compress = compress

    def serve(self, channel) -> None:
        meta = struct.pack("<QI", self.dataset.total_bytes, len(self.dataset.images))
        send_message(channel, ParamMessage(MessageKind.HELLO, client=self.client_id,
                                           meta=meta))
        begin = recv_message(channel)
        if begin.kind != MessageKind.BEGIN:
            raise ValueError(f"expected run mode, got {begin.kind.name}")
        mode = begin.meta[0]
        if mode == MODE_BASELINE:
            self._serve_baseline(channel)
        elif mode == MODE_FEDERATED:
            self._serve_federated(channel)
        else:
            raise ValueError(f"unknown run mode {mode}")

    def _serve_baseline(self, channel) -> None:
        for img in self.dataset.images:
            if img.path is None:
                raise ValueError(f"image {img.name!r} has no backing file to upload")
            send_message(channel, ParamMessage(MessageKind.DATASET,
                                               client=self.client_id,
                                               payload=img.path.read_bytes(),
                                               meta=_pose_meta(img)),
                         compress=self.compress)
        send_message(channel, ParamMessage(MessageKind.DONE, client=self.client_id))

    def _serve_federated(self, channel) -> None:
        frozen = recv_message(channel)
        if frozen.kind != MessageKind.FROZEN:
            raise ValueError(f"expected frozen factors, got {frozen.kind.name}")
        rights = decode_frozen(frozen.payload)
        task = make_task(self.arch, self.render_options)
        fact = None
        adam = None
        while True:
            msg = recv_message(channel)
            if msg.kind == MessageKind.DONE:
                return
            if msg.kind != MessageKind.LEARNABLE:
                raise ValueError(f"expected learnable set, got {msg.kind.name}")
            lefts, biases = decode_learnable(msg.payload)
            if fact is None:
                fact = assemble_factorized(lefts, rights, biases, self.arch)
                adam = Adam(fact.learnable_tensors(), lr=self.train_options.lr,
                            beta1=self.train_options.beta1,
                            beta2=self.train_options.beta2,
                            eps=self.train_options.eps,
                            lr_decay=self.train_options.lr_decay)
            else:
                for layer, left, bias in zip(fact.all_layers(), lefts, biases):
                    layer.left[...] = left
                    layer.bias[...] = bias
            rng = np.random.default_rng(
                derive_seed(self.schedule.seed, "client", self.client_id, msg.round))
            sparse_train(fact, self.dataset, self.schedule.iters_per_merge, rng,
                         task, self.train_options, adam=adam)
            send_message(channel, ParamMessage(MessageKind.LEARNABLE,
                                               round=msg.round,
                                               client=self.client_id,
                                               payload=encode_learnable(fact)),
                         compress=self.compress)


# ---------------------------------------------------------------------------
# server side

@dataclass
class ClientHandles:
    """Connected clients: a channel and declared dataset size per id."""

    channels: dict[int, object]
    sizes: dict[int, int]
    image_counts: dict[int, int]

    @classmethod
    def from_hellos(cls, channels, hellos) -> "ClientHandles":
        sizes, counts = {}, {}
        for k, hello in hellos.items():
            nbytes, nimages = struct.unpack("<QI", hello.meta)
            sizes[k] = nbytes
            counts[k] = nimages
        return cls(channels=channels, sizes=sizes, image_counts=counts)

    def ordered(self):
        return sorted(self.channels)

    def weights(self, weight_by: str = "bytes") -> list[int]:
        src = self.sizes if weight_by == "bytes" else self.image_counts
        return [src[k] for k in self.ordered()]

    def close(self):
        for chan in self.channels.values():
            chan.close()


@dataclass
class BaselineResult:
    params: NetworkParams
    ledger: BandwidthLedger


@dataclass
class FederatedResult:
    params: NetworkParams
    factorized: FactorizedParams
    ledger: BandwidthLedger
    ranks: list[int]
    frozen_bytes: int
    learnable_bytes: int

    def formula_bytes(self, schedule: MergeSchedule) -> int:
        return federated_formula_bytes(schedule.clients, schedule.merges,
                                       self.frozen_bytes, self.learnable_bytes)


def _begin(handles: ClientHandles, mode: int) -> None:
    for k in handles.ordered():
        send_message(handles.channels[k],
                     ParamMessage(MessageKind.BEGIN, meta=bytes([mode])))


def run_baseline(schedule: MergeSchedule, init_params: NetworkParams,
                 handles: ClientHandles, render_options: RenderOptions,
                 train_options: TrainOptions = TrainOptions(),
                 compress: bool = False) -> BaselineResult:
    """Upload every client dataset, then train centrally for T iterations."""
    from .radiance import read_ppm_bytes

    ledger = BandwidthLedger()
    _begin(handles, MODE_BASELINE)
    datasets = []
    for k in handles.ordered():
        chan = handles.channels[k]
        images = []
        while True:
            msg = recv_message(chan, ledger=ledger, direction="up")
            if msg.kind == MessageKind.DONE:
                break
            name, pose, focal, cx, cy = _parse_pose_meta(msg.meta)
            images.append(PosedImage(pixels=read_ppm_bytes(msg.payload), pose=pose,
                                     focal=focal, cx=cx, cy=cy,
                                     stored_bytes=len(msg.payload), name=name))
        datasets.append(ClientDataset(images=images, id=k))
    params = init_params.copy()
    if schedule.baseline_iters > 0:
        task = make_task(params.arch, render_options)
        rng = np.random.default_rng(derive_seed(schedule.seed, "baseline"))
        train(params, datasets, schedule.baseline_iters, rng, task, train_options)
    return BaselineResult(params=params, ledger=ledger)


def run_fednerf(schedule: MergeSchedule, init_params: NetworkParams,
                handles: ClientHandles, render_options: RenderOptions,
                train_options: TrainOptions = TrainOptions(),
                deterministic: bool = True, weight_by: str = "bytes",
                refactor: str = "average",
                compress: bool = False) -> FederatedResult:
    """Factorize once, then run M broadcast/train/merge rounds.

    ``deterministic`` serializes clients in index order (results are
    identical either way because client seeds are scheduling-free).
    ``refactor`` selects direct averaging of the left factors or the
    least-squares refactorization of the recovered average; the two are
    equivalent up to solver tolerance.
    """
    ledger = BandwidthLedger()
    _begin(handles, MODE_FEDERATED)
    fact = parameterise(init_params, schedule.alpha)
    rights = [layer.right for layer in fact.all_layers()]
    frozen_payload = encode_frozen(fact)
    for k in handles.ordered():
        send_message(handles.channels[k],
                     ParamMessage(MessageKind.FROZEN, client=k,
                                  payload=frozen_payload),
                     ledger=ledger, direction="down", compress=compress)

    order = handles.ordered()
    sizes = handles.weights(weight_by)
    learnable_bytes = len(encode_learnable(fact))
    current = fact
    for m in range(1, schedule.merges + 1):
        payload = encode_learnable(current)
        if len(payload) != learnable_bytes:
            raise RuntimeError("learnable payload size changed between rounds")
        replies: dict[int, ParamMessage] = {}

        def send_to(k):
            send_message(handles.channels[k],
                         ParamMessage(MessageKind.LEARNABLE, round=m, client=k,
                                      payload=payload),
                         ledger=ledger, direction="down", compress=compress)

        if deterministic:
            for k in order:
                send_to(k)
                replies[k] = recv_message(handles.channels[k], ledger=ledger)
        else:
            for k in order:
                send_to(k)
            for k in order:
                replies[k] = recv_message(handles.channels[k], ledger=ledger)

        updates = []
        for k in order:
            msg = replies[k]
            if msg.kind != MessageKind.LEARNABLE or msg.round != m or msg.client != k:
                raise RuntimeError(
                    f"unexpected reply {msg.kind.name} (round {msg.round}, "
                    f"client {msg.client}) while merging round {m}")
            lefts, biases = decode_learnable(msg.payload)
            updates.append(assemble_factorized(lefts, rights, biases,
                                               init_params.arch))
        if refactor == "average":
            current = combine_learnable(updates, sizes)
        elif refactor == "lstsq":
            merged = combine([recover(u) for u in updates], sizes)
            current = refactorize(merged, rights)
        else:
            raise ValueError(f"unknown refactor mode {refactor!r}")

    for k in order:
        send_message(handles.channels[k], ParamMessage(MessageKind.DONE))
    return FederatedResult(params=recover(current), factorized=current,
                           ledger=ledger, ranks=fact.ranks(),
                           frozen_bytes=len(frozen_payload),
                           learnable_bytes=learnable_bytes)


# ---------------------------------------------------------------------------
# in-process runner

def start_inproc_clients(schedule: MergeSchedule, datasets: list[ClientDataset],
                         arch, render_options: RenderOptions,
                         train_options: TrainOptions,
                         compress: bool = False):
    """Spawn one worker thread per client over queue channels."""
    if len(datasets) != schedule.clients:
        raise ValueError(f"need {schedule.clients} datasets, got {len(datasets)}")
    channels, hellos, threads = {}, {}, []
    for k, dataset in enumerate(datasets):
        server_end, client_end = QueueChannel.make_pair()
        worker = ClientWorker(k, dataset, arch, schedule, render_options,
                              train_options, compress=compress)
        thread = threading.Thread(target=worker.serve, args=(client_end,),
                                  name=f"client-{k}", daemon=True)
        thread.start()
        threads.append(thread)
        channels[k] = server_end
        hellos[k] = recv_message(server_end)
    handles = ClientHandles.from_hellos(channels, hellos)
    return handles, threads


def _run_local(runner, schedule, init_params, datasets, render_options,
               train_options, **kwargs):
    handles, threads = start_inproc_clients(schedule, datasets, init_params.arch,
                                            render_options, train_options,
                                            compress=kwargs.get("compress", False))
    try:
        result = runner(schedule, init_params, handles, render_options,
                        train_options, **kwargs)
    finally:
        for t in threads:
            t.join(timeout=30)
        handles.close()
    return result


def run_baseline_local(schedule, init_params, datasets,
                       render_options: RenderOptions,
                       train_options: TrainOptions = TrainOptions(),
                       compress: bool = False) -> BaselineResult:
    return _run_local(run_baseline, schedule, init_params, datasets,
                      render_options, train_options, compress=compress)


def run_fednerf_local(schedule, init_params, datasets,
                      render_options: RenderOptions,
                      train_options: TrainOptions = TrainOptions(),
                      deterministic: bool = True, weight_by: str = "bytes",
                      refactor: str = "average",
                      compress: bool = False) -> FederatedResult:
    return _run_local(run_fednerf, schedule, init_params, datasets,
                      render_options, train_options,
                      deterministic=deterministic, weight_by=weight_by,
                      refactor=refactor, compress=compress)

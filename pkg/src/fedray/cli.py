"""Command-line front end.

Subcommands cover the whole experiment protocol: ``generate`` writes a
synthetic scene split across clients, ``pretrain`` fits the initial
model on the pretraining fraction, ``baseline`` uploads data and trains
centrally, ``federated`` runs the compressed merge rounds, ``compare``
evaluates the three checkpoints on the shared validation views, and
``render`` draws a single view. ``client`` is the worker process for
TCP transport.

Configuration is a flat ``key = value`` text file; every key is also a
command-line flag that overrides the file. Set ``FEDRAY_LOG`` to change
log verbosity. Exit codes: 2 invalid config, 3 missing file, 4
divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .federated import (
    BandwidthLedger,
    ClientHandles,
    ClientWorker,
    FederatedResult,
    MergeSchedule,
    compression_ratio,
    derive_seed,
    federated_formula_bytes,
    run_baseline,
    run_baseline_local,
    run_fednerf,
    run_fednerf_local,
)
from .metrics import emit_csv, evaluate_views
from .net import DivergenceError, NetArch, desk_arch, full_arch, init_network
from .radiance import (
    RenderOptions,
    TrainOptions,
    desk_scene,
    generate_synthetic_scene,
    load_dataset,
    make_task,
    parse_scene_file,
    train,
    write_ppm,
)
from .transport import load_checkpoint, save_checkpoint, serve_clients

log = logging.getLogger("fedray")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


@dataclass
class RunConfig:
    """Everything a run needs; validated before any compute."""

    task: str = "image2d"
    scene: str = ""  # scene spec file; empty selects the built-in scene
    out: str = "runs/desk"
    seed: int = 0
    arch: str = "desk"
    use_fine: bool = False
    image_size: int = 64
    train_views: int = 100
    val_views: int = 8
    pretrain_fraction: float = 0.2
    clients: int = 4
    alpha: float = 0.9
    merges: int = 20
    iters_per_merge: int = 100
    baseline_iters: int = 2000
    pretrain_iters: int = 2000
    batch_size: int = 256
    n_coarse: int = 32
    n_fine: int = 0
    near: float = 0.5
    far: float = 4.5
    lr: float = 5e-4
    transport: str = "inproc"
    tcp_host: str = "127.0.0.1"
    tcp_port: int = 29500
    deterministic: bool = True
    compress: bool = False
    weight_by: str = "bytes"
    refactor: str = "average"

    def validate(self) -> None:
        if self.task not in ("image2d", "nerf3d"):
            raise ValueError(f"task must be image2d or nerf3d, got {self.task!r}")
        if self.arch not in ("desk", "full"):
            raise ValueError(f"arch must be desk or full, got {self.arch!r}")
        if self.transport not in ("inproc", "tcp"):
            raise ValueError(f"transport must be inproc or tcp, got {self.transport!r}")
        if self.weight_by not in ("bytes", "images"):
            raise ValueError(f"weight_by must be bytes or images, got {self.weight_by!r}")
        if self.refactor not in ("average", "lstsq"):
            raise ValueError(f"refactor must be average or lstsq, got {self.refactor!r}")
        if not (0.0 <= self.pretrain_fraction < 1.0):
            raise ValueError("pretrain_fraction must be in [0, 1)")
        if self.train_views < self.clients:
            raise ValueError("need at least one training view per client")
        self.schedule()  # raises on bad federation hyperparameters

    def schedule(self) -> MergeSchedule:
        return MergeSchedule(alpha=self.alpha, merges=self.merges,
                             iters_per_merge=self.iters_per_merge,
                             clients=self.clients,
                             baseline_iters=self.baseline_iters, seed=self.seed)

    def net_arch(self) -> NetArch:
        base = desk_arch if self.arch == "desk" else full_arch
        return base(task=self.task, use_fine=self.use_fine)

    def render_options(self) -> RenderOptions:
        return RenderOptions(near=self.near, far=self.far, n_coarse=self.n_coarse,
                             n_fine=self.n_fine)

    def train_options(self) -> TrainOptions:
        return TrainOptions(batch_size=self.batch_size, lr=self.lr)

    def scene_spec(self):
        if not self.scene:
            return desk_scene()
        path = Path(self.scene)
        if not path.exists():
            raise FileNotFoundError(f"scene file not found: {path}")
        return parse_scene_file(path)

    @property
    def run_dir(self) -> Path:
        return Path(self.out)

    @property
    def data_dir(self) -> Path:
        return self.run_dir / "data"

    def checkpoint(self, stage: str) -> Path:
        return self.run_dir / f"{stage}.fnrf"

    def as_lines(self) -> list[str]:
        return [f"{f.name} = {getattr(self, f.name)}"
                for f in dataclasses.fields(self)]


def _coerce(value: str, target_type):
    if target_type is bool:
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return target_type(value)


def parse_config_file(path: Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return values


def load_config(args: argparse.Namespace) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    if args.config is not None:
        for key, raw in parse_config_file(args.config).items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, type(fields[key].default))
    for name, f in fields.items():
        override = getattr(args, name, None)
        if override is not None:
            kwargs[name] = override
    config = RunConfig(**kwargs)
    config.validate()
    return config


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key = value config file")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default_type = type(f.default)
        if default_type is bool:
            parser.add_argument(flag, default=None,
                                type=lambda v: _coerce(v, bool),
                                metavar="BOOL", help=f"override {f.name}")
        else:
            parser.add_argument(flag, default=None, type=default_type,
                                help=f"override {f.name}")


# ---------------------------------------------------------------------------
# manifests

def _write_manifest(path: Path, config: RunConfig, extra_sections: list[tuple[str, list[str]]]):
    lines = ["# fedray run manifest", "[config]"] + config.as_lines()
    for title, body in extra_sections:
        lines.append(f"[{title}]")
        lines.extend(body)
    path.write_text("\n".join(lines) + "\n")
    log.info("wrote %s", path)


def _ledger_section(ledger: BandwidthLedger) -> list[str]:
    body = ledger.summary_lines()
    for r in ledger.records:
        body.append(f"{r.direction} {r.kind.name.lower()} round={r.round} "
                    f"client={r.client} raw={r.raw_bytes} wire={r.wire_bytes}")
    return body


def _rank_section(result: FederatedResult, arch: NetArch) -> list[str]:
    tags = [tag for tag, _, _ in arch.layer_dims()]
    if arch.use_fine:
        tags = tags * 2
    body = []
    for i, (layer, tag) in enumerate(zip(result.factorized.all_layers(), tags)):
        u, r = layer.left.shape
        v = layer.right.shape[1]
        body.append(f"layer_{i:02d} tag={tag} shape={u}x{v} rank={r} "
                    f"full_rank={min(u, v)}")
    return body


# ---------------------------------------------------------------------------
# commands

def cmd_generate(config: RunConfig) -> int:
    config.run_dir.mkdir(parents=True, exist_ok=True)
    (config.run_dir / "config.txt").write_text("\n".join(config.as_lines()) + "\n")
    rng = np.random.default_rng(derive_seed(config.seed, "generate"))
    gen = generate_synthetic_scene(
        config.scene_spec(), config.train_views, config.image_size, rng,
        config.data_dir, clients=config.clients, n_val=config.val_views,
        pretrain_fraction=config.pretrain_fraction, task=config.task,
        options=config.render_options())
    n_pre = len(gen.pretrain.images) if gen.pretrain else 0
    log.info("generated %d pretrain + %s client + %d validation views under %s",
             n_pre, "/".join(str(len(ds.images)) for ds in gen.clients),
             len(gen.validation), config.data_dir)
    return 0


def _load_clients(config: RunConfig) -> list:
    return [load_dataset(config.data_dir / f"client_{k}", k)
            for k in range(config.clients)]


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path} (run the earlier stages first)")
    return path


def cmd_pretrain(config: RunConfig) -> int:
    pretrain_dir = _require(config.data_dir / "pretrain", "pretraining data")
    dataset = load_dataset(pretrain_dir, -1)
    arch = config.net_arch()
    params = init_network(arch, np.random.default_rng(derive_seed(config.seed, "init")))
    task = make_task(arch, config.render_options())
    rng = np.random.default_rng(derive_seed(config.seed, "pretrain"))
    log.info("pretraining for %d iterations on %d views",
             config.pretrain_iters, len(dataset.images))
    train(params, [dataset], config.pretrain_iters, rng, task,
          config.train_options())
    nbytes = save_checkpoint(config.checkpoint("init"), params)
    log.info("wrote %s (%d bytes)", config.checkpoint("init"), nbytes)
    return 0


def _tcp_handles(config: RunConfig) -> ClientHandles:
    log.info("waiting for %d clients on %s:%d",
             config.clients, config.tcp_host, config.tcp_port)
    channels, hellos = serve_clients(config.tcp_host, config.tcp_port,
                                     config.clients)
    return ClientHandles.from_hellos(channels, hellos)


def cmd_baseline(config: RunConfig) -> int:
    init = load_checkpoint(_require(config.checkpoint("init"), "initial checkpoint"),
                           config.net_arch())
    schedule = config.schedule()
    log.info("baseline: uploading datasets, then %d central iterations",
             schedule.baseline_iters)
    if config.transport == "tcp":
        handles = _tcp_handles(config)
        try:
            result = run_baseline(schedule, init, handles, config.render_options(),
                                  config.train_options(), compress=config.compress)
        finally:
            handles.close()
    else:
        result = run_baseline_local(schedule, init, _load_clients(config),
                                    config.render_options(),
                                    config.train_options(),
                                    compress=config.compress)
    save_checkpoint(config.checkpoint("base"), result.params)
    _write_manifest(config.run_dir / "baseline_manifest.txt", config,
                    [("bandwidth", _ledger_section(result.ledger))])
    log.info("baseline upload total: %d bytes", result.ledger.total_raw)
    return 0


def cmd_federated(config: RunConfig) -> int:
    init = load_checkpoint(_require(config.checkpoint("init"), "initial checkpoint"),
                           config.net_arch())
    schedule = config.schedule()
    if schedule.merges * schedule.iters_per_merge != schedule.baseline_iters:
        log.warning("M * upsilon = %d differs from baseline T = %d",
                    schedule.merges * schedule.iters_per_merge,
                    schedule.baseline_iters)
    kwargs = dict(deterministic=config.deterministic, weight_by=config.weight_by,
                  refactor=config.refactor, compress=config.compress)
    if config.transport == "tcp":
        handles = _tcp_handles(config)
        try:
            result = run_fednerf(schedule, init, handles, config.render_options(),
                                 config.train_options(), **kwargs)
        finally:
            handles.close()
    else:
        result = run_fednerf_local(schedule, init, _load_clients(config),
                                   config.render_options(),
                                   config.train_options(), **kwargs)
    save_checkpoint(config.checkpoint("fed"), result.params)

    formula = result.formula_bytes(schedule)
    measured = result.ledger.total_raw
    dataset_bytes = sum(
        img.stat().st_size
        for k in range(config.clients)
        for img in sorted((config.data_dir / f"client_{k}").glob("*.ppm")))
    from .transport import encode_dense
    dense_bytes = len(encode_dense(init))
    update_ratio = result.learnable_bytes / dense_bytes
    section = [
        f"frozen_bytes = {result.frozen_bytes}",
        f"learnable_bytes = {result.learnable_bytes}",
        f"dense_model_bytes = {dense_bytes}",
        f"update_compression = {1.0 - update_ratio:.4f}",
        f"formula_bytes = {formula}",
        f"measured_bytes = {measured}",
        f"formula_matches = {formula == measured}",
        f"dataset_upload_bytes = {dataset_bytes}",
        f"compression_ratio_vs_baseline = {dataset_bytes / measured:.4f}",
    ]
    _write_manifest(config.run_dir / "federated_manifest.txt", config,
                    [("schedule", [f"alpha = {schedule.alpha}",
                                   f"merges = {schedule.merges}",
                                   f"iters_per_merge = {schedule.iters_per_merge}",
                                   f"clients = {schedule.clients}",
                                   f"seed = {schedule.seed}"]),
                     ("ranks", _rank_section(result, config.net_arch())),
                     ("compression", section),
                     ("bandwidth", _ledger_section(result.ledger))])
    if formula != measured:
        log.error("ledger does not match the transfer formula: %d != %d",
                  measured, formula)
        return 1
    log.info("federated transfer total: %d bytes (formula-exact)", measured)
    return 0


def _load_validation(config: RunConfig):
    val_dir = _require(config.data_dir / "val", "validation data")
    return load_dataset(val_dir, -2).images


def cmd_compare(config: RunConfig) -> int:
    arch = config.net_arch()
    stages = [("Init", "init"), ("Base", "base"), ("Fed", "fed")]
    val_images = _load_validation(config)
    truths = [img.pixels for img in val_images]
    task = make_task(arch, config.render_options())
    reports = []
    renders_dir = config.run_dir / "renders"
    renders_dir.mkdir(parents=True, exist_ok=True)
    for stage_name, stem in stages:
        params = load_checkpoint(
            _require(config.checkpoint(stem), f"{stage_name} checkpoint"), arch)
        rendered = [task.render_view(params, img) for img in val_images]
        for i, img in enumerate(rendered):
            write_ppm(renders_dir / f"{stem}_view_{i:04d}.ppm", img)
        reports.append(evaluate_views(stage_name, rendered, truths))
    emit_csv(reports, config.run_dir / "metrics.csv")
    print(f"{'stage':<6} {'mse':>12} {'psnr':>9} {'ssim':>8}")
    for report in reports:
        print(f"{report.stage:<6} {report.mean_mse:>12.6f} "
              f"{report.mean_psnr:>9.3f} {report.mean_ssim:>8.4f}")
    log.info("wrote %s", config.run_dir / "metrics.csv")
    return 0


def cmd_render(config: RunConfig, stage: str, view: int, out: Path | None) -> int:
    arch = config.net_arch()
    params = load_checkpoint(_require(config.checkpoint(stage), f"{stage} checkpoint"),
                             arch)
    val_images = _load_validation(config)
    if not (0 <= view < len(val_images)):
        raise ValueError(f"view index {view} outside 0..{len(val_images) - 1}")
    task = make_task(arch, config.render_options())
    rendered = task.render_view(params, val_images[view])
    out = out or config.run_dir / "renders" / f"{stage}_view_{view:04d}.ppm"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, rendered)
    log.info("wrote %s", out)
    return 0


def cmd_client(config: RunConfig, client_id: int, data_dir: Path | None) -> int:
    from .transport import connect_to_server

    directory = data_dir or config.data_dir / f"client_{client_id}"
    dataset = load_dataset(_require(directory, "client data"), client_id)
    worker = ClientWorker(client_id, dataset, config.net_arch(), config.schedule(),
                          config.render_options(), config.train_options(),
                          compress=config.compress)
    log.info("client %d connecting to %s:%d with %d views (%d bytes)",
             client_id, config.tcp_host, config.tcp_port, len(dataset.images),
             dataset.total_bytes)
    worker.serve(connect_to_server(config.tcp_host, config.tcp_port))
    log.info("client %d done", client_id)
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedray",
        description="federated radiance-field training with low-rank "
                    "update compression")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("generate", "render a synthetic scene and split it across clients"),
        ("pretrain", "train the initial model on the pretraining views"),
        ("baseline", "upload all data and train centrally"),
        ("federated", "run compressed federated merge rounds"),
        ("compare", "evaluate init/base/fed on the validation views"),
        ("render", "render one validation view from a checkpoint"),
        ("client", "run a TCP client worker"),
    ]:
        p = sub.add_parser(name, help=help_text)
        add_config_flags(p)
        if name == "render":
            p.add_argument("--stage", default="fed",
                           choices=["init", "base", "fed"])
            p.add_argument("--view", type=int, default=0)
            p.add_argument("--output", type=Path, default=None)
        if name == "client":
            p.add_argument("--client-id", type=int, required=True)
            p.add_argument("--data-dir", type=Path, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("FEDRAY_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        if args.command == "generate":
            return cmd_generate(config)
        if args.command == "pretrain":
            return cmd_pretrain(config)
        if args.command == "baseline":
            return cmd_baseline(config)
        if args.command == "federated":
            return cmd_federated(config)
        if args.command == "compare":
            return cmd_compare(config)
        if args.command == "render":
            return cmd_render(config, args.stage, args.view, args.output)
        if args.command == "client":
            return cmd_client(config, args.client_id, args.data_dir)
        raise ValueError(f"unknown command {args.command}")
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

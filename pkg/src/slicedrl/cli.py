"""Command-line front end: ``dataset``, ``train``, ``eval`` and ``serve``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path

from .config import RunConfig, load_config
from .core import ConfigurationError, IncompleteDatasetError
from .dqn import DatasetEnv, extract_policy, train_offline
from .e2bus import E2Node, EndpointClosed, TcpEndpoint, connect_endpoint, inprocess_pair, serve_endpoint
from .experiments import RESULT_FIELDS, dataset_plan, profiles, run_dataset, run_eval
from .policy import FixedWeight, PolicyError, ProportionalFair, TrainedPolicy
from .ransim import DEFAULT_WEIGHT, PROPORTIONAL_FAIR, WEIGHTED, GnbSim, initial_weight
from .svg import line_chart, moving_average
from .traffic import SweepPlan
from .xapps import KpmStore, RCXApp, SMXApp, aggregate_delay_table, read_delay_table, write_delay_table

log = logging.getLogger("slicedrl")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def provenance(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.digest(), "seed": cfg.seed, **extra}


def _comment_line(meta: dict) -> str:
    return json.dumps(meta, sort_keys=True)


def _write_csv(path: Path, header: list[str], rows: list[dict], meta: dict) -> None:
    buf = io.StringIO()
    buf.write(f"# {_comment_line(meta)}\n")
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    path.write_text(buf.getvalue())


# ---------------------------------------------------------------- dataset

def cmd_dataset(cfg: RunConfig, args) -> int:
    out = args.out
    if args.plan:
        plan = SweepPlan.from_csv(args.plan)
        if args.window_s is not None:
            plan = dataclasses.replace(plan, window_s=args.window_s)
        if args.kpm_period_ms is not None:
            plan = dataclasses.replace(plan, kpm_period_ms=args.kpm_period_ms)
    else:
        plan = dataset_plan(cfg)
    store_path = out / "kpm.jsonl"
    if store_path.exists():
        store_path.unlink()
    t0 = time.perf_counter()
    with KpmStore(store_path) as store:
        run_dataset(cfg, store, plan)
        rows_per_cell = {}
        for meta, _ in store.records():
            rows_per_cell[meta["scenario"]] = rows_per_cell.get(meta["scenario"], 0) + 1
        missing = [i for i in range(len(plan)) if rows_per_cell.get(i, 0) == 0]
        if missing:
            for i in missing:
                c = plan.cells[i]
                log.error("cell %d (%g Mbps, weight %s) produced no KPM rows", i, c.slice1_rate_mbps, c.weight_pct)
            return EXIT_RUNTIME
        table = aggregate_delay_table(store, cfg.quantizer, cfg.actions)
    meta = provenance(cfg, cells=len(plan), window_s=plan.window_s, kpm_period_ms=plan.kpm_period_ms)
    write_delay_table(table, out / "delay_table.csv", _comment_line(meta))
    print(f"dataset: {len(plan)} cells, {sum(rows_per_cell.values())} KPM rows "
          f"in {time.perf_counter() - t0:.1f} s -> {store_path}, {out / 'delay_table.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def cmd_train(cfg: RunConfig, args) -> int:
    out = args.out
    table_path = Path(args.table) if args.table else out / "delay_table.csv"
    table = read_delay_table(table_path)
    table.check_complete(cfg.quantizer, cfg.actions)
    dqn_cfg = cfg.dqn
    env = DatasetEnv(table, cfg.quantizer, cfg.actions, cfg.reward)

    def progress(ep, r, eps):
        if (ep + 1) % 100 == 0:
            log.info("episode %d/%d mean reward %.3f eps %.3f", ep + 1, dqn_cfg.episodes, r, eps)

    t0 = time.perf_counter()
    result = train_offline(env, dqn_cfg, progress)
    meta = provenance(
        cfg,
        quantizer=dataclasses.asdict(cfg.quantizer),
        layers=list(dqn_cfg.layer_sizes(env.state_dim, env.n_actions)),
        dqn_config=dqn_cfg.digest(),
        episodes=dqn_cfg.episodes,
    )
    policy = extract_policy(result.network, cfg.quantizer, cfg.actions, meta)
    policy.save(out / "policy.csv")
    trace_rows = [{"episode": i + 1, "mean_reward": r} for i, r in enumerate(result.reward_trace)]
    _write_csv(out / "reward_trace.csv", ["episode", "mean_reward"], trace_rows, meta)
    if not args.no_svg:
        xs = list(range(1, len(result.reward_trace) + 1))
        svg = line_chart(
            {"per episode": (xs, result.reward_trace),
             "moving avg (50)": (xs, moving_average(result.reward_trace, 50))},
            title="Training reward", xlabel="episode", ylabel="mean reward",
            comment=_comment_line(meta),
        )
        (out / "reward.svg").write_text(svg)
    tr = result.reward_trace
    k = min(100, len(tr))
    print(f"train: {len(tr)} episodes in {time.perf_counter() - t0:.1f} s; "
          f"first-{k} mean {sum(tr[:k]) / k:.3f}, last-{k} mean {sum(tr[-k:]) / k:.3f} -> {out / 'policy.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _eval_charts(rows: list[dict], meta: dict) -> dict[str, str]:
    charts = {}
    specs = [("loss", "loss_pct", "Packet loss", "loss (%)"),
             ("latency", "latency_ms", "Mean SDU latency", "latency (ms)"),
             ("departure", "departure_mbps", "Departure rate", "departure (Mbps)")]
    for name, field, title, ylabel in specs:
        series = {}
        for sch in ("drl", "pf"):
            for sl in (1, 2):
                pts = sorted((r["slice1_rate_mbps"], r[field]) for r in rows
                             if r["scheduler"] == sch and r["slice"] == sl)
                series[f"{sch.upper()}-S{sl}"] = ([p[0] for p in pts], [p[1] for p in pts])
        charts[name] = line_chart(series, title=title, xlabel="Slice-1 arrival rate (Mbps)",
                                  ylabel=ylabel, comment=_comment_line(meta))
    return charts


def cmd_eval(cfg: RunConfig, args) -> int:
    out = args.out
    policy_path = Path(args.policy) if args.policy else out / "policy.csv"
    policy = TrainedPolicy.load(policy_path, cfg.quantizer)
    t0 = time.perf_counter()
    res = run_eval(cfg, policy, keep_records=False)
    meta = provenance(cfg, policy=policy.metadata.get("config_hash"),
                      duration_s=cfg.traffic.eval_duration_s)
    _write_csv(out / "results.csv", RESULT_FIELDS, res.rows, meta)
    if not args.no_svg:
        for name, svg in _eval_charts(res.rows, meta).items():
            (out / f"{name}.svg").write_text(svg)
    print(f"eval: {len(res.rows)} rows in {time.perf_counter() - t0:.1f} s -> {out / 'results.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- serve

def _policy_for(args, cfg: RunConfig):
    if args.scheduler == "pf":
        return ProportionalFair()
    if args.scheduler == "fixed":
        if args.weight not in cfg.actions:
            raise UsageError(f"--weight {args.weight} is not in the action space")
        return FixedWeight(args.weight)
    path = Path(args.policy) if args.policy else args.out / "policy.csv"
    return TrainedPolicy.load(path, cfg.quantizer)


def _accept_loop(srv, node: E2Node, stop: threading.Event) -> None:
    srv.settimeout(0.2)
    while not stop.is_set():
        try:
            conn, addr = srv.accept()
        except TimeoutError:
            continue
        except OSError:
            return
        conn.settimeout(None)
        log.info("xApp connected from %s:%s", *addr[:2])
        node.attach(TcpEndpoint(conn, f"{addr[0]}:{addr[1]}"))


def cmd_serve(cfg: RunConfig, args) -> int:
    policy = _policy_for(args, cfg)
    pf = isinstance(policy, ProportionalFair)
    transport = cfg.transport
    sim = GnbSim(cfg.gnb, PROPORTIONAL_FAIR if pf else WEIGHTED, initial_weight(cfg.actions), cfg.actions)
    node = E2Node(sim, profiles(cfg, args.slice1_rate, cfg.traffic.slice2_rate_mbps), cfg.seed)
    stop = threading.Event()
    store_path = args.out / "serve_kpm.jsonl"
    if store_path.exists():
        store_path.unlink()
    store = KpmStore(store_path)
    meta = provenance(cfg, scheduler=args.scheduler, slice1_mbps=args.slice1_rate)

    def on_sigint(signum, frame):
        log.info("interrupt: stopping")
        stop.set()

    old = signal.signal(signal.SIGINT, on_sigint) if threading.current_thread() is threading.main_thread() else None
    srv = threads = None
    try:
        if transport.mode == "tcp":
            srv = serve_endpoint(transport.host, transport.port)
            log.info("gNB E2 endpoint listening on %s:%d", transport.host, srv.getsockname()[1])
            threads = [threading.Thread(target=_accept_loop, args=(srv, node, stop), daemon=True)]
            threads[0].start()
            sm_ep = None if args.no_xapps else connect_endpoint(transport.host, srv.getsockname()[1])
            rc_ep = None if (args.no_xapps or pf) else connect_endpoint(transport.host, srv.getsockname()[1])
        else:
            sm_node, sm_ep = inprocess_pair("sm")
            node.attach(sm_node)
            rc_ep = None
            if not pf:
                rc_node, rc_ep = inprocess_pair("rc")
                node.attach(rc_node)
        sm = rc = None
        if sm_ep is not None:
            sm = SMXApp(sm_ep, store, cfg.traffic.kpm_period_ms, meta)
            if rc_ep is not None:
                rc = RCXApp(rc_ep, policy, cfg.quantizer)
                sm.listeners.append(rc.on_kpm)
            sm.start()

        def pump():
            try:
                if sm is not None:
                    sm.pump()
                if rc is not None:
                    rc.pump()
            except EndpointClosed:
                log.warning("xApp endpoint closed; gNB holds weight %s", sim.weight_pct)

        if transport.mode == "tcp":
            # wait for the local xApps' subscription to land before time starts
            deadline = time.monotonic() + 5.0
            while sm is not None and not node.subscriptions and time.monotonic() < deadline:
                node.poll()
                time.sleep(0.01)

        paced = args.speed > 0
        t_wall = time.monotonic()
        t_sim = sim.slot_index

        def on_boundary():
            if transport.mode == "tcp":
                time.sleep(0.002)
            pump()
            if paced:
                ahead = (sim.slot_index - t_sim) * cfg.gnb.slot_ms / 1000 / args.speed - (time.monotonic() - t_wall)
                if ahead > 0:
                    time.sleep(ahead)

        duration = args.duration_s if args.duration_s is not None else float("inf")
        chunk = 1.0
        elapsed = 0.0
        while elapsed < duration and not stop.is_set():
            step = min(chunk, duration - elapsed)
            node.run(step, on_boundary=on_boundary, should_stop=stop.is_set)
            elapsed += step
        if transport.mode == "tcp":
            time.sleep(0.05)
        pump()
    finally:
        stop.set()
        store.flush()
        store.close()
        if srv is not None:
            srv.close()
        for ep in list(node.endpoints):
            try:
                ep.close()
            except OSError:
                pass
        if old is not None:
            signal.signal(signal.SIGINT, old)
    sim_s = sim.slot_index * cfg.gnb.slot_ms / 1000
    print(f"serve: {sim_s:g} simulated s, {len(store)} KPM rows, "
          f"{node.controls_applied} controls applied -> {args.out / 'serve_kpm.jsonl'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slicedrl", description="DQN slice-weight xApp on a simulated gNB.")
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--seed", type=int, help="run seed (traffic phases and DQN)")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--workers", type=int, help="worker processes for sweeps (0: all CPUs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("dataset", help="run the fixed-weight sweep and build the delay table")
    d.add_argument("--window-s", type=float, help="simulated seconds per cell")
    d.add_argument("--kpm-period-ms", type=float, help="KPM reporting period")
    d.add_argument("--plan", help="sweep plan CSV (default: full state x weight grid)")

    t = sub.add_parser("train", help="train the DQN offline on a delay table")
    t.add_argument("--table", help="delay table CSV (default: OUT/delay_table.csv)")
    t.add_argument("--episodes", type=int)
    t.add_argument("--no-svg", action="store_true")

    e = sub.add_parser("eval", help="closed-loop DRL versus PF over the evaluation scenarios")
    e.add_argument("--policy", help="policy CSV (default: OUT/policy.csv)")
    e.add_argument("--duration-s", type=float, help="simulated seconds per scenario")
    e.add_argument("--rates", type=float, nargs="+", help="Slice-1 arrival rates in Mbps")
    e.add_argument("--no-svg", action="store_true")

    s = sub.add_parser("serve", help="host the gNB E2 endpoint with SM and RC xApps")
    s.add_argument("--scheduler", choices=("drl", "pf", "fixed"), default="drl")
    s.add_argument("--policy", help="policy CSV for --scheduler drl (default: OUT/policy.csv)")
    s.add_argument("--weight", type=int, default=DEFAULT_WEIGHT, help="weight for --scheduler fixed")
    s.add_argument("--transport", choices=("inprocess", "tcp"))
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--duration-s", type=float, help="simulated seconds (default: until interrupted)")
    s.add_argument("--slice1-rate", type=float, default=60.0, help="Slice-1 offered load in Mbps")
    s.add_argument("--speed", type=float, default=0.0,
                   help="simulated seconds per wall second (0: as fast as possible)")
    s.add_argument("--no-xapps", action="store_true", help="tcp only: wait for external xApps")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    over = {"seed": args.seed, "workers": args.workers}
    if args.seed is not None:
        over["dqn__seed"] = args.seed
    cmd = args.command
    if cmd == "dataset":
        over.update(traffic__dataset_window_s=args.window_s, traffic__kpm_period_ms=args.kpm_period_ms)
    elif cmd == "train":
        over.update(dqn__episodes=args.episodes)
    elif cmd == "eval":
        over.update(traffic__eval_duration_s=args.duration_s,
                    traffic__eval_rates_mbps=tuple(args.rates) if args.rates else None)
    elif cmd == "serve":
        over.update(transport__mode=args.transport, transport__host=args.host, transport__port=args.port)
    return cfg.replace(**over)


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval, "serve": cmd_serve}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.out = Path(args.out)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except (ConfigurationError, IncompleteDatasetError, PolicyError, UsageError,
            FileNotFoundError, ValueError, TypeError, KeyError) as exc:
        print(f"slicedrl: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, RuntimeError, FloatingPointError) as exc:
        print(f"slicedrl: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Four simulated gateways replicate a mixed workload while one of them crashes.

Run with ``python demos/replicated_gateways.py [seed]``.
"""
import sys

from ctxchain.gateway import NetConfig, run_network
from ctxchain.workload import Scenario, WorkloadSpec, build_lanes

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
spec = WorkloadSpec(Scenario.D, contexts=4, calls_per_context=5, load_devices=2, load_tx_per_device=4)
config = NetConfig(seed=seed, latency_ns=(500_000, 1_500_000))

healthy, _ = run_network(4, config, build_lanes(spec, 4, seed))
crash_at = healthy.sim_end_ns // 2
print(f"fault-free run: {healthy.sim_end_ns / 1e6:.2f} ms simulated, {len(healthy.of('decided'))} decision records across gateways")

trace, cluster = run_network(4, config, build_lanes(spec, 4, seed), crash=(0, crash_at))
replies = [r for d in cluster.devices for r in d.results]
print(f"gateway 0 (the first leader) crashes at {crash_at / 1e6:.2f} ms")
print(f"view changes: {len(trace.of('new_view'))}, replies: {len(replies)}, all ok: {all(r.ok for r in replies)}")
print(f"surviving gateways: {sorted(trace.chains)}, identical chains: {len(set(trace.chains.values())) == 1}")
cluster.check_replication()
print("every context block has the same state root on every surviving gateway")

"""Replay the bundled Alice and Bob scenario and summarise its metrics.

The same run is available from the command line:
    warpnet run alice_bob --seed 0 --metrics out.kv --transcript out.txt

Run:  python3 demos/04_scenario_file.py
"""

from warpnet.scenario import bundled_scenario, run_scenario

path = bundled_scenario("alice_bob")
result = run_scenario(path, seed=0)
print(f"{path.name}: {result.passed} expectations passed, {len(result.failures)} failed, exit {result.exit_status}")
for key in ("messages_sent", "serves", "cache_hits", "upstream_content_fetches", "tu_commands_applied", "stale_serves"):
    print(f"  {key:<26} {result.metrics[key]}")
print("first transcript lines:")
print("".join(result.transcript.splitlines(keepends=True)[:5]), end="")

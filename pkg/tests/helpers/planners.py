import sys
import textwrap

RESPONDER = textwrap.dedent(
    """
    import json
    import sys

    for line in sys.stdin:
        request = json.loads(line)
        if request["type"] == "plan":
            label = request["keypoints"][0]["label"]
            print(json.dumps({"program": f"stage to_{label} {{ reward: -norm2(cum(a)[T-1] - p[0]); high: -0.05; low: -0.5; }}"}), flush=True)
        elif request["type"] == "next_stage":
            print(json.dumps({"action": "continue"}), flush=True)
        else:
            print(json.dumps({"action": "abort", "history": request["history"]}), flush=True)
    """
)

SILENT = "import sys, time\nfor line in sys.stdin:\n    time.sleep(30)\n"
GARBAGE = "import sys\nfor line in sys.stdin:\n    print('not json', flush=True)\n"
BAD_PROGRAM = "import sys, json\nfor line in sys.stdin:\n    print(json.dumps({'program': 'reward: a[99][0];'}), flush=True)\n"


def planner_command(directory, source, name="planner.py"):
    """Write a planner child script and return the argv that starts it."""
    path = directory / name
    path.write_text(source, encoding="utf-8")
    return [sys.executable, str(path)]

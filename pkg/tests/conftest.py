"""Shared pytest hooks: a one-line PASS/FAIL verdict per acceptance
criterion, printed in the terminal summary of any run that includes
tests/test_acceptance.py.
"""

import re

_CRITERIA = {
    1: "patchify/unpatchify roundtrip is bit-exact",
    2: "mask arithmetic: floor count, partition invariants, per-index frequency",
    3: "masked loss ignores visible predictions; gradients match finite differences",
    4: "replace-visible reconstruction exact on visible patches; multi-pass mean",
    5: "box perturbation locality, beta=1 identity, k/beta empirical means",
    6: "BCE value at 0.5, gradient vs finite differences, flip symmetry",
    7: "trapezoidal AUROC equals the pairwise rank oracle",
    8: "SSIM self-similarity, symmetry, independent windowed reference",
    9: "end-to-end synthetic pipeline clears the AUROC bar within budget",
    10: "identical seeds reproduce the pipeline AUROC exactly",
    11: "ablation machinery: mask-ratio sweep incl. zero ratio, no-MAE mode",
}

_NODE = re.compile(r"test_acceptance\.py::test_c(\d+)_")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts: dict[int, bool] = {}
    for outcome, ok in (("passed", True), ("failed", False),
                        ("error", False), ("skipped", False)):
        for rep in terminalreporter.stats.get(outcome, []):
            match = _NODE.search(getattr(rep, "nodeid", ""))
            if match:
                num = int(match.group(1))
                verdicts[num] = verdicts.get(num, True) and ok
    if not verdicts:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(verdicts):
        word = "PASS" if verdicts[num] else "FAIL"
        terminalreporter.write_line(
            f"ACCEPTANCE {num:2d} {word} — {_CRITERIA.get(num, '')}")

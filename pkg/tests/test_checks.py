from inflora.checks import check_suite


def test_suite_passes_on_clean_build():
    lines = []
    results = check_suite(out=lines.append)
    assert results and all(r.passed for r in results), "\n".join(lines)
    assert len(lines) == len(results)
    prop = next(r for r in results if r.name == "branch/full-weight equivalence")
    assert prop.observed <= 1e-10 and "tolerance" in lines[0]


def test_injected_fault_is_isolated():
    results = {r.name: r for r in check_suite(fault="skip-projection", out=None)}
    assert results["branch/full-weight equivalence"].passed
    assert not results["old-task orthogonality"].passed
    others = [r for n, r in results.items() if n not in ("old-task orthogonality",)]
    assert all(r.passed for r in others)

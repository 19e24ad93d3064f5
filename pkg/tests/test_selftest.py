from icse.selftest import run_all


def test_all_checks_pass():
    results = run_all()
    assert len(results) == 5
    assert all(r.passed for r in results), [(r.name, r.measured) for r in results if not r.passed]

from egma.gradcheck import COMPONENTS, check_component, run_suite


def test_single_trial_suite_passes():
    reports = run_suite(seed=3, trials=1)
    assert list(reports) == list(COMPONENTS)
    assert all(r.passed for r in reports.values())


def test_full_coordinates_pass_on_batch_loss():
    assert check_component("total_loss", seed=5, trials=2, coords=None).passed


def test_corruption_is_detected():
    for name in COMPONENTS:
        r = check_component(name, trials=1, corrupt=True)
        assert not r.passed, name

from portionmtl.gradcheck import TOLERANCE, components, run_suite, uncovered_ops


def test_full_suite_passes():
    results = run_suite(trials=2)
    bad = [r.line() for r in results if not r.passed]
    assert not bad, bad
    assert all(r.max_rel_error <= TOLERANCE for r in results)


def test_every_primitive_is_covered():
    assert uncovered_ops() == []


def test_corrupted_gradient_is_caught():
    names = ["op:conv2d", "layer_norm", "cdfa+ln+bn"]
    results = run_suite(trials=1, corrupt=names, only=names)
    assert [r.passed for r in results] == [False, False, False]


def test_components_cover_layers_losses_and_heads():
    names = set(components())
    for need in ("layer_norm", "batch_norm(train)", "loss:cross_entropy", "loss:l1", "loss:soft_sharing",
                 "cdfa", "cdfa+bn", "cdfa+ln", "cdfa+ln+bn"):
        assert need in names

import time

import numpy as np

from cbnn import gradcheck


class TestFullReport:
    def test_default_seed_passes(self):
        report = gradcheck.run_all(seed=0)
        assert report.passed
        # 17 ops + 2 nets + 4 objectives + phi branch
        assert len(report.results) == 24

    def test_runtime_under_budget(self):
        t0 = time.time()
        gradcheck.run_all(seed=0)
        assert time.time() - t0 < 30.0

    def test_corrupt_hook_fails(self):
        # negative control: a broken gradient must be caught
        report = gradcheck.run_all(seed=0, corrupt=True)
        assert not report.passed
        names = [r.name for r in report.results if not r.passed]
        assert all(n.startswith("objective:") for n in names)

    def test_kink_distances_certified(self):
        report = gradcheck.run_all(seed=0)
        for r in report.results:
            assert r.kink_distance > gradcheck.KINK_MARGIN, r.name

    def test_seeded_determinism(self):
        a = gradcheck.run_all(seed=3)
        b = gradcheck.run_all(seed=3)
        assert [r.max_rel_err for r in a.results] == [r.max_rel_err for r in b.results]

    def test_report_lines_one_per_check(self):
        report = gradcheck.run_all(seed=0)
        lines = report.lines()
        assert len(lines) == len(report.results) + 1  # plus the worst line
        assert all(l.startswith("[PASS]") for l in lines[:-1])


class TestPieces:
    def test_away_clears_margin(self):
        rng = np.random.default_rng(0)
        x = gradcheck._away(rng.uniform(-2, 2, 1000), 0.3)
        assert np.all(np.abs(x - 0.3) >= 0.05)

    def test_phi_branch_check(self):
        res = gradcheck.check_phi_branch()
        assert res.passed

    def test_objectives_all_modes_listed(self):
        names = {r.name for r in gradcheck.check_objectives(seed=0)}
        assert names == {
            "objective:unconstrained", "objective:soft",
            "objective:hard", "objective:cocp",
        }

    def test_rel_err_floor(self):
        # tiny gradients compare against the floor, not each other
        assert gradcheck._rel_err(1e-12, 5e-11) < 1e-6

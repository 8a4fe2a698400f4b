import numpy as np
import pytest

from conftest import chain, make_tree, star
from treeformer.scheduler import (
    Bucket,
    DependencyViolation,
    Group,
    Schedule,
    build_schedule,
    check_schedule,
    cost_report,
)
from treeformer.trees import depth, random_tree


class TestBuildSchedule:
    def test_single_node_zero_unit_applications(self):
        schedule = build_schedule([make_tree({})])
        assert schedule.bottom_up_levels == []
        assert schedule.top_down_levels == []

    def test_chain_depth4(self):
        schedule = build_schedule([chain(4)])
        assert len(schedule.bottom_up_levels) == 3
        assert len(schedule.top_down_levels) == 3
        for group in schedule.bottom_up_levels + schedule.top_down_levels:
            assert len(group.members) == 1

    def test_twin_trees_coscheduled(self):
        tree = make_tree({0: [1, 2], 2: [3, 4]})
        schedule = build_schedule([tree, tree])
        for group in schedule.bottom_up_levels:
            members = {t for t, _ in group.members}
            assert members == {0, 1}  # same-height nodes of both trees together
            nodes0 = {n for t, n in group.members if t == 0}
            nodes1 = {n for t, n in group.members if t == 1}
            assert nodes0 == nodes1

    def test_group_count_bound(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            batch = [
                random_tree(rng, int(rng.integers(1, 60)), 4, 3, 3)
                for _ in range(int(rng.integers(1, 6)))
            ]
            schedule = build_schedule(batch)
            steps = len(schedule.bottom_up_levels) + len(schedule.top_down_levels)
            assert steps == 2 * (max(depth(t) for t in batch) - 1)

    def test_power_of_two_bucket_widths(self):
        tree = star(5)
        schedule = build_schedule([tree])
        widths = [b.width for g in schedule.bottom_up_levels for b in g.buckets]
        assert widths == [8]

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            build_schedule([])


class TestCheckSchedule:
    def test_accepts_built_schedules_on_random_trees(self):
        rng = np.random.default_rng(1)
        trees = [
            random_tree(rng, int(rng.integers(1, 40)), int(rng.integers(2, 7)), 3, 3)
            for _ in range(1000)
        ]
        for start in range(0, 1000, 50):
            batch = trees[start : start + 50]
            check_schedule(build_schedule(batch), batch)

    def test_parent_before_child_rejected(self):
        batch = [chain(3)]
        schedule = build_schedule(batch)
        swapped = Schedule(
            bottom_up_levels=list(reversed(schedule.bottom_up_levels)),
            top_down_levels=schedule.top_down_levels,
            row_offset=schedule.row_offset,
            row_index=schedule.row_index,
            n_rows=schedule.n_rows,
            max_depth=schedule.max_depth,
        )
        with pytest.raises(DependencyViolation):
            check_schedule(swapped, batch)

    def test_omitted_node_rejected(self):
        batch = [chain(3)]
        schedule = build_schedule(batch)
        truncated = Schedule(
            bottom_up_levels=schedule.bottom_up_levels[:-1],
            top_down_levels=schedule.top_down_levels,
            row_offset=schedule.row_offset,
            row_index=schedule.row_index,
            n_rows=schedule.n_rows,
            max_depth=schedule.max_depth,
        )
        with pytest.raises(DependencyViolation):
            check_schedule(truncated, batch)

    def test_bad_mask_rejected(self):
        batch = [star(3)]
        schedule = build_schedule(batch)
        group = schedule.bottom_up_levels[0]
        bucket = group.buckets[0]
        bad_mask = bucket.mask.copy()
        bad_mask[0, 0] = 0.0
        bad_bucket = Bucket(
            bucket.width, bucket.parents, bucket.child_rows, bad_mask,
            bucket.child_counts, bucket.parent_members,
        )
        tampered = Schedule(
            bottom_up_levels=[Group(group.members, [bad_bucket])],
            top_down_levels=schedule.top_down_levels,
            row_offset=schedule.row_offset,
            row_index=schedule.row_index,
            n_rows=schedule.n_rows,
            max_depth=schedule.max_depth,
        )
        with pytest.raises(DependencyViolation):
            check_schedule(tampered, batch)


class TestCostReport:
    def test_star_closed_form(self):
        k = 7
        report = cost_report([star(k)])
        assert report.attention_cells == k * k
        assert report.full_attention_cells == (k + 1) ** 2

    def test_chain_closed_form(self):
        n = 9
        report = cost_report([chain(n)])
        assert report.attention_cells == n - 1
        assert report.full_attention_cells == n * n

    def test_ratio_grows_linearly_with_tree_size(self):
        rng = np.random.default_rng(2)
        sizes = [50, 100, 200, 400]
        ratios = []
        for size in sizes:
            batch = [random_tree(rng, size, 4, 3, 3) for _ in range(8)]
            report = cost_report(batch)
            ratios.append(report.full_attention_cells / report.attention_cells)
        assert all(b > a for a, b in zip(ratios, ratios[1:]))
        slope = np.polyfit(np.log(sizes), np.log(ratios), 1)[0]
        assert slope > 0.8

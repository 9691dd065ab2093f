import math

import pytest
from hypothesis import given, settings, strategies as st

from diffprobe.backbone import build_registry, reference_config, toy_config
from diffprobe.commands import load_dataset, open_checkpoint
from diffprobe.config import ProbeConfig
from diffprobe.errors import EmptySweepError, InvalidConfigError
from diffprobe.heads import HeadConfig
from diffprobe.probe import ProbeRecipe
from diffprobe.runs import ExperimentManifest, verify_manifest
from diffprobe.sweep import (CellFailure, FeatureSource, SweepGrid, cell_seed, default_b_values,
                             default_t_values, plot_heatmaps, read_sweep_table, run_sweep,
                             select_best, write_sweep_table)
from conftest import MICRO_DATA

cells = st.dictionaries(st.tuples(st.integers(1, 50), st.integers(1, 9), st.integers(1, 4)),
                        st.sampled_from([0.1, 0.25, 0.5, 0.75]), min_size=1, max_size=20)


@given(cells)
@settings(max_examples=80, deadline=None)
def test_best_cell_is_max_with_lexicographic_ties(table):
    best = select_best(table)
    top = max(table.values())
    assert table[best] == top
    assert best == min(k for k, v in table.items() if v == top)


def test_empty_or_all_failed_sweep_raises():
    with pytest.raises(EmptySweepError):
        select_best({(1, 1, 1): CellFailure("boom")})


def test_default_grids():
    assert default_t_values(1000) == [1, 5, 10, 25, 50, 90, 150, 250, 500, 999]
    assert default_t_values(100)[-1] == 100 and default_t_values(100)[0] == 1
    reg = build_registry(reference_config())
    assert reg.bottleneck in default_b_values(reg)
    tiny = build_registry(toy_config())
    assert all(1 <= b <= len(tiny) for b in default_b_values(tiny, 7))


def test_cell_seed_is_stable_and_distinct():
    assert cell_seed(0, 10, 3, 1) == cell_seed(0, 10, 3, 1)
    assert len({cell_seed(0, t, b, p) for t in (1, 2) for b in (1, 2) for p in (1, 2)}) == 8


def test_empty_axis_rejected():
    head = HeadConfig(family="linear", input_channels=4, num_classes=2)
    with pytest.raises(InvalidConfigError):
        SweepGrid(t_values=(), b_values=(1,), pool_values=(1,), head=head)


@pytest.fixture(scope="module")
def source(micro_run):
    ws, run_dir, _ = micro_run
    model, sched, _ = open_checkpoint(str(run_dir), None, ws)
    ds = load_dataset(ProbeConfig(checkpoint="x", **MICRO_DATA))
    return FeatureSource(model, sched, ds, seed=0)


def _grid(source, pools=(1,)):
    reg = source.model.registry
    head = HeadConfig(family="linear", input_channels=reg[2].out_channels, num_classes=4)
    return SweepGrid(t_values=(5, 900), b_values=(2, 6), pool_values=pools, head=head,
                     recipe=ProbeRecipe(epochs=2, batch_size=16))


def test_sweep_writes_nested_cells_and_resumes(source, tmp_path):
    grid = _grid(source)
    parent = ExperimentManifest("sweep", {}, "d", 0)
    res = run_sweep(grid, source, out_dir=tmp_path, parent=parent)
    assert set(res.table) == set(grid.cells())
    assert len(parent.children) == 4
    for child in parent.children:
        assert not verify_manifest((tmp_path / child).parent)
    again_parent = ExperimentManifest("sweep", {}, "d", 0)
    again = run_sweep(grid, source, out_dir=tmp_path, parent=again_parent)
    assert again.accuracies() == res.accuracies()
    assert again_parent.children == parent.children
    write_sweep_table(res, tmp_path / "sweep.csv")
    back = read_sweep_table(tmp_path / "sweep.csv")
    assert back == res.accuracies()
    pngs = plot_heatmaps(res.accuracies(), tmp_path)
    assert [p.name for p in pngs] == ["heatmap_p1.png"]


def test_failing_cell_is_recorded_and_sweep_continues(source, tmp_path):
    # pool 9 exceeds the 8x8 maps of block 6 but fits the 16x16 maps of block 2
    grid = _grid(source, pools=(9,))
    res = run_sweep(grid, source, budget=1, out_dir=tmp_path)
    failed = [k for k, v in res.table.items() if isinstance(v, CellFailure)]
    assert failed and len(failed) < len(res.table)
    assert res.best is not None and res.best[1] == 2
    assert all(math.isnan(res.table[k].top1_accuracy) for k in failed)
    assert all(len(v.per_epoch_losses) == 1 for v in res.table.values()
               if not isinstance(v, CellFailure))


def test_single_cell_grid_equals_direct_probe(source, tmp_path):
    from diffprobe.probe import train_probe
    from diffprobe.sweep import cell_head
    reg = source.model.registry
    head = HeadConfig(family="linear", input_channels=reg[3].out_channels, num_classes=4)
    grid = SweepGrid(t_values=(20,), b_values=(3,), pool_values=(1,), head=head,
                     recipe=ProbeRecipe(epochs=3, batch_size=16), master_seed=7)
    res = run_sweep(grid, source)
    train, val, flip = source.records(20, [3], [1])[(3, 1)]
    direct = train_probe(train, val, cell_head(grid, reg, 3, 1), grid.recipe,
                         seed=cell_seed(7, 20, 3, 1), train_flipped=flip)
    cell = res.table[(20, 3, 1)]
    assert res.best == (20, 3, 1)
    assert cell.top1_accuracy == direct.top1_accuracy
    assert cell.per_epoch_losses == direct.per_epoch_losses


def test_tie_between_steps_prefers_smaller_t():
    assert select_best({(150, 4, 1): 0.8, (90, 4, 1): 0.8}) == (90, 4, 1)


def test_single_successful_cell_is_selected():
    assert select_best({(5, 2, 1): 0.3, (9, 2, 1): CellFailure("x")}) == (5, 2, 1)


def test_hand_table_max():
    table = {(1, 3, 1): 0.41, (90, 6, 2): 0.77, (500, 6, 1): 0.52}
    assert select_best(table) == (90, 6, 2)

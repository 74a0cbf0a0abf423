"""Smoke test of the sg_align Python extension.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import math
import tempfile
from pathlib import Path

import sg_align


def main() -> None:
    pair = sg_align.ScenePair.generate(seed=3, overlap=(0.5, 1.0))
    assert pair.num_src_nodes >= 5 and pair.num_ref_nodes >= 5
    assert 0.5 <= pair.overlap_fraction <= 1.0
    assert len(pair.gt_transform) == 16

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "pair.json"
        pair.save(str(path))
        again = sg_align.ScenePair.load(str(path))
        assert again.to_json() == pair.to_json()

        model = sg_align.Model(seed=1)
        alignment = model.align(pair)
        soft = alignment.soft_matrix
        assert len(soft) == pair.num_src_nodes + 1
        for row in soft[:-1]:
            assert math.isclose(sum(row), 1.0, abs_tol=1e-6)
        assert 0.0 <= alignment.similarity <= 1.0
        metrics = alignment.evaluate(pair)
        assert 0.0 <= metrics.hits_1 <= metrics.hits_3 <= metrics.hits_5 <= 1.0

        train = [sg_align.ScenePair.generate(seed=s) for s in range(4)]
        trained, curve = model.train(train, epochs=2, seed=0)
        assert [e.epoch for e in curve] == [0, 1]
        assert all(math.isfinite(e.l) for e in curve)

        ckpt = Path(tmp) / "model.ckpt"
        trained.save(str(ckpt))
        loaded = sg_align.Model.load(str(ckpt))
        assert loaded.align(pair).soft_matrix == trained.align(pair).soft_matrix

    oracle = sg_align.oracle_alignment(pair)
    result = sg_align.register(pair, oracle, strategy="o2o")
    assert result.strategy == "o2o"
    assert result.rre_deg < 0.5 and result.rte < 0.01, result.rre_deg
    assert result.scc is not None and result.scc > 0.9

    try:
        sg_align.register(pair, None, strategy="o2o")
    except RuntimeError:
        pass
    else:
        raise AssertionError("o2o without an alignment must fail")

    try:
        sg_align.ScenePair.generate(seed=0, preset="no_such_preset")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset must fail")

    corrupted = pair.corrupted("wrong_node_semantics", 0.25, seed=0)
    assert corrupted.num_src_nodes == pair.num_src_nodes
    assert sg_align.overlap_decision(0.5, "all") and not sg_align.overlap_decision(0.3, "all")
    print("smoke test passed:", pair, alignment, result.strategy)


if __name__ == "__main__":
    main()

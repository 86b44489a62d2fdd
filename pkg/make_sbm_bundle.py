"""
Script to write the synthetic stochastic-block-model bundle used by the
quick-start and learning-sanity runs.
Run: python make_sbm_bundle.py [OUTPUT_DIR]
"""
import sys
from dataclasses import replace
from pathlib import Path

# Add project root to Python path
sys.path.append(str(Path(__file__).parent))

from oscgnn.graph import make_sbm, make_splits
from oscgnn.storage import write_bundle


def create_sample_bundle(out: str = "data/sbm", seed: int = 0) -> Path:
    """Two blocks of 50 nodes, p_in=0.2, p_out=0.02, feature noise 0.5, 20 train per class."""
    bundle = make_sbm(blocks=2, nodes_per_block=50, p_in=0.2, p_out=0.02, feature_noise=0.5, seed=seed)
    masks = make_splits(bundle, train_per_class=20, val_count=20, seed=seed)
    root = write_bundle(replace(bundle, masks=masks), out)
    train, val, test = masks.sizes()
    print(f"Wrote {bundle.graph.n} nodes and {bundle.graph.num_edges} edges to {root}")
    print(f"Split: {train} train / {val} val / {test} test")
    return root


if __name__ == "__main__":
    create_sample_bundle(sys.argv[1] if len(sys.argv) > 1 else "data/sbm")

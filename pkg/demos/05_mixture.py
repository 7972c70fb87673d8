"""Training on blends of body classes.

The gravity network is trained on mixtures of stochastic prism unions and
random-walk blobs in proportion lambda and then scored on held-out sets of
each class.  At desk scale the numbers are noisy; the table shows the shape
of the experiment, not a tuned optimum.
"""

# %%
import sys
from pathlib import Path

from geoinv.dataset import GeneratorConfig, make_operators
from geoinv.grid import SensorPlane, VoxelDomain
from geoinv.model import DESK_ARCH
from geoinv.train import TrainConfig, mixture_experiment, write_table_csv

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

domain = VoxelDomain(0, 400, 0, 400, 0, 200, 8, 8, 4)
plane = SensorPlane(0, 400, 0, 400, 8, 8)
gen = GeneratorConfig(toy_steps=3, prism_min=2, prism_max=5)
cfg = TrainConfig(learning_rate=1e-3, max_epochs=15, epsilon=0.05, mode="separate_g")

res = mixture_experiment("STOCH", "TOY", [0.0, 0.25, 0.5, 0.75, 1.0], cfg, domain, plane, DESK_ARCH,
                         K=120, n_valid=20, gen=gen, operators=make_operators(domain, plane))
write_table_csv(res.rows(), res.header, out / "mixture.csv")
print("  ".join(f"{h:>7s}" for h in res.header))
for row in res.rows():
    print("  ".join(f"{v:7.3f}" for v in row))

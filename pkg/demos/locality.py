"""Attribute distance versus neighbor distance for a smooth scene and a shuffled control."""

from locogs.coherence import ATTRIBUTES, coherence_report
from locogs.synthetic import coherent_scene, iid_scene


def show(name, scene):
    report = coherence_report(scene, n=20_000, seed=0)
    print(f"{name}: thresholds {['%.0e' % t for t in report.thresholds]}")
    for a in ATTRIBUTES:
        means = " ".join(f"{m:8.4f}" for m in report.means(a))
        print(f"  {a:12s} {means}")


if __name__ == "__main__":
    show("smooth", coherent_scene(50_000, seed=0))
    show("i.i.d.", iid_scene(50_000, seed=0))

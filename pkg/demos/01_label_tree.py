"""
Label trees and weighted targets
================================

A walk through the built-in SemanticKITTI taxonomy and the weighted
multi-hot targets a hierarchical model is trained against.
"""

from hmcseg.encoding import encode_target, target_weight_sum
from hmcseg.hierarchy import builtin_semantickitti, parse_hierarchy

h = builtin_semantickitti()
print(h.summary())

# Leaves come first in the id space, then one block per level up to the root.
for level in range(h.height):
    print(level, [h.name(c) for c in h.nodes_at_level(level)])

# Every leaf has exactly one ancestor per level.
car = h.id("car")
print("car ->", [h.name(c) for c in h.superclasses(car)])
print("level-2 ancestor of bicyclist:", h.name(h.ancestor_at_level(h.id("bicyclist"), 2)))

# Targets put weight on the leaf and on each ancestor. The default weighting
# gives the leaf the largest value, so the optimal prediction is the leaf.
for mode in ("prose", "formula"):
    t = encode_target(h, car, mode)
    path = {h.name(c): float(t.eta[c]) for c in [car, *h.superclasses(car)]}
    print(f"{mode:8s}", path, f"sum of exp weights {target_weight_sum(t):.3f}")

# Custom trees use one "child > parent" line per node.
tiny = parse_hierarchy(
    """
    any
    static > any
    dynamic > any
    road > static
    car > dynamic
    person > dynamic
    """
)
print(tiny.summary())
print(tiny.serialize())

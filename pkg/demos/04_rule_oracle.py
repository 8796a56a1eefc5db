"""The family-tree queries are exactly what a two-hop rule with relation variables derives.

The rule chains two parent edges, (E1, C1, E3) and (E3, C, E2), into a
grandparent edge (E1, C1, E2). Relation variables are quantified like node
variables, so C either equals C1 or differs from it. Two clauses cover both cases.

    python3 demos/04_rule_oracle.py
"""
from deqkg import fd2_graph, random_permutation_pair
from deqkg.datasets import FD2_CLAUSES, uqer_derive, uqer_derive_all
from deqkg.graph import apply_permutation

for c in FD2_CLAUSES:
    print(f"clause: body {c.atoms} -> head (0, 0, {c.head_var - 1})")

for depth in (2, 3, 4, 5):
    g, queries = fd2_graph([depth])
    derived = uqer_derive_all(FD2_CLAUSES, g)
    per_clause = [len(uqer_derive(c, g)) for c in FD2_CLAUSES]
    print(f"depth {depth}: {g.num_nodes} nodes, generator gives {len(queries)} queries, "
          f"rules derive {len(derived)} (per clause {per_clause}), equal: {derived == set(queries)}")

g, _ = fd2_graph([4])
p = random_permutation_pair(g.num_nodes, g.num_relations, seed=1)
moved = uqer_derive_all(FD2_CLAUSES, apply_permutation(g, p))
print("derivation commutes with relabelling:",
      moved == {p.map_triplet(t) for t in uqer_derive_all(FD2_CLAUSES, g)})

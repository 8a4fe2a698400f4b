# Parse a mini-language program and look at the resulting syntax tree.
#
# The parser produces a concrete-syntax-flavored tree: binary operators,
# unary minus, and expression parentheses are explicit leaf nodes, so every
# operator "lives" somewhere a pointer head can point at.

from treeformer.minilang import MINI_VOCAB, operator_nodes, parse
from treeformer.trees import branching_stats, depth, depths, tree_to_line

source = """
s = 0;
i = 2;
while (i < 10) {
  s = s + (i * i);
  i = i + 1;
}
return s;
"""

tree = parse(source)
stats = branching_stats(tree)
print(f"nodes: {stats.node_count}, depth: {depth(tree)}, "
      f"max children: {stats.max_children}, avg children: {stats.avg_children:.2f}")

# walk the tree level by level
by_level = {}
for nid, level in depths(tree).items():
    by_level.setdefault(level, []).append(nid)
for level in sorted(by_level):
    names = [MINI_VOCAB.type_symbol(tree.node(n).type_id) for n in sorted(by_level[level])]
    print(f"level {level}: {names}")

# operator leaves are the localization candidates for the wrong-operator task
ops = operator_nodes(tree)
symbols = [MINI_VOCAB.token_symbol(tree.node(n).token_id) for n in ops]
print(f"operator leaves: {dict(zip(ops, symbols))}")

# one-line canonical serialization (what corpus files contain)
print(tree_to_line(tree, MINI_VOCAB)[:120] + " ...")

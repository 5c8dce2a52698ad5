"""Directed-graph helpers for occlusion ordering."""


def strongly_connected_components(nodes, succ):
    """Tarjan's algorithm, iterative.

    ``succ`` maps a node to an iterable of successors. Components come out
    in reverse topological order of the condensation (sinks first).
    """
    index = {}
    low = {}
    on_stack = set()
    stack = []
    comps = []
    counter = 0
    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(succ.get(root, ())))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(succ.get(w, ()))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                comps.append(comp)
    return comps


def condensation_levels(nodes, succ):
    """Longest-path depth of every node from the sources of the condensed DAG.

    Members of one strongly connected component share a level; a node with
    no incoming edges from outside its component sits at level 0.
    """
    nodes = list(nodes)
    comps = strongly_connected_components(nodes, succ)
    comp_of = {v: i for i, comp in enumerate(comps) for v in comp}
    level = [0] * len(comps)
    # Tarjan emits sinks first, so walking backwards visits sources first.
    for ci in range(len(comps) - 1, -1, -1):
        for v in comps[ci]:
            for w in succ.get(v, ()):
                cj = comp_of[w]
                if cj != ci and level[cj] < level[ci] + 1:
                    level[cj] = level[ci] + 1
    return {v: level[comp_of[v]] for v in nodes}

"""
Dependency graph execution for homfem
Deterministic topological scheduling and a coordinated thread pool for homogenization tasks
"""

import heapq
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from graphlib import CycleError as GraphCycleError
from graphlib import TopologicalSorter
from types import MappingProxyType
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

try:
    from .errors import CycleError, DependencyError, EngineError, HomfemError
    from .logger import log_debug, log_step
except ImportError:
    from errors import CycleError, DependencyError, EngineError, HomfemError
    from logger import log_debug, log_step


PENDING = 'pending'
READY = 'ready'
RUNNING = 'running'
DONE = 'done'
FAILED = 'failed'

TaskFn = Callable[[str, Mapping[str, Any]], Any]


@dataclass
class TaskGraph:
    """Nodes with their requirements, a valid schedule and per-node state"""

    requires: Dict[str, Tuple[str, ...]]
    schedule: Tuple[str, ...]
    states: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.states:
            self.states = {node: PENDING for node in self.requires}
        self.dependents: Dict[str, List[str]] = {node: [] for node in self.requires}
        for node, deps in self.requires.items():
            for dep in deps:
                self.dependents[dep].append(node)

    def downstream(self, node: str) -> List[str]:
        """All nodes depending on `node`, directly or transitively, in schedule order."""
        seen = set()
        stack = [node]
        while stack:
            for dependent in self.dependents[stack.pop()]:
                if dependent not in seen:
                    seen.add(dependent)
                    stack.append(dependent)
        return [n for n in self.schedule if n in seen]


def _find_cycle(requires: Mapping[str, Sequence[str]]) -> List[str]:
    try:
        TopologicalSorter(requires).prepare()
    except GraphCycleError as e:
        cycle = list(e.args[1][:-1])
        start = cycle.index(min(cycle))
        cycle = cycle[start:] + cycle[:start]
        # graphlib reports dependency direction; list nodes in requires order
        return [cycle[0]] + cycle[1:][::-1]
    return []


def resolve_dependencies(requires: Mapping[str, Sequence[str]]) -> TaskGraph:
    """Topological schedule with a lexicographic tie-break (Kahn's algorithm).

    Args:
        requires: node -> names it requires

    Raises:
        DependencyError: a required name is not a node
        CycleError: the graph is cyclic
    """
    requires = {node: tuple(sorted(set(deps))) for node, deps in requires.items()}
    for node in sorted(requires):
        for dep in requires[node]:
            if dep not in requires:
                raise DependencyError(f"'{node}' requires undefined '{dep}'")
            if dep == node:
                raise CycleError([node])

    in_degree = {node: len(deps) for node, deps in requires.items()}
    dependents: Dict[str, List[str]] = {node: [] for node in requires}
    for node, deps in requires.items():
        for dep in deps:
            dependents[dep].append(node)

    ready = [node for node, degree in in_degree.items() if degree == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for dependent in dependents[node]:
            in_degree[dependent] -= 1
            if in_degree[dependent] == 0:
                heapq.heappush(ready, dependent)

    if len(order) != len(requires):
        raise CycleError(_find_cycle(requires))
    return TaskGraph(requires=requires, schedule=tuple(order))


def execute_graph(graph: TaskGraph, run_task: TaskFn, n_workers: int = 1) -> Dict[str, Any]:
    """Run every node once its requirements are done, up to n_workers at a time.

    The coordinator (calling thread) owns all state transitions and results;
    a task receives a read-only view of its requirements' results. A failed
    node fails all its dependents; independent nodes still run.

    Raises:
        EngineError: one or more nodes failed, with root causes
    """
    if n_workers < 1:
        raise DependencyError(f"worker count must be positive, got {n_workers}")
    states = graph.states
    results: Dict[str, Any] = {}
    failures: Dict[str, str] = {}
    roots: Dict[str, List[str]] = {}
    position = {node: n for n, node in enumerate(graph.schedule)}
    waiting = {node: set(deps) for node, deps in graph.requires.items()}
    ready = [(position[node], node) for node, deps in waiting.items() if not deps]
    heapq.heapify(ready)
    for _, node in ready:
        states[node] = READY

    def fail(node: str, reason: str):
        states[node] = FAILED
        failures[node] = reason
        for dependent in graph.downstream(node):
            if states[dependent] in (PENDING, READY):
                states[dependent] = FAILED
                roots.setdefault(dependent, []).append(node)

    with ThreadPoolExecutor(max_workers=n_workers, thread_name_prefix='homfem-engine') as pool:
        running: Dict[Future, str] = {}
        while ready or running:
            while ready and len(running) < n_workers:
                _, node = heapq.heappop(ready)
                if states[node] != READY:
                    continue
                missing = [dep for dep in graph.requires[node] if states[dep] != DONE]
                if missing:
                    raise DependencyError(f"'{node}' scheduled before {missing} were done")
                states[node] = RUNNING
                inputs = MappingProxyType({dep: results[dep] for dep in graph.requires[node]})
                log_debug(f"start {node}", "ENGINE")
                running[pool.submit(run_task, node, inputs)] = node

            finished, _ = wait(list(running), return_when=FIRST_COMPLETED)
            for future in sorted(finished, key=lambda f: position[running[f]]):
                node = running.pop(future)
                error = future.exception()
                if error is not None:
                    reason = error.message if isinstance(error, HomfemError) else repr(error)
                    log_step(f"{node} failed: {reason}", "ENGINE")
                    fail(node, reason)
                    continue
                results[node] = future.result()
                states[node] = DONE
                log_step(f"{node} done", "ENGINE")
                for dependent in graph.dependents[node]:
                    waiting[dependent].discard(node)
                    if not waiting[dependent] and states[dependent] == PENDING:
                        states[dependent] = READY
                        heapq.heappush(ready, (position[dependent], dependent))

    for node, causes in roots.items():
        failures[node] = f"failed due to {', '.join(sorted(set(causes)))}"
    if failures:
        raise EngineError(failures)
    return results


def root_causes(error: EngineError) -> Dict[str, Optional[str]]:
    """Node -> failed requirement it was skipped for (None for nodes that failed themselves)."""
    out = {}
    prefix = 'failed due to '
    for node, reason in error.failures.items():
        out[node] = reason[len(prefix):] if reason.startswith(prefix) else None
    return out

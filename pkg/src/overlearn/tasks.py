"""Task registries: the classification tasks defined on each image."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class TaskSpec:
    """One classification task and its label vocabulary."""

    name: str
    class_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.class_names) != len(set(self.class_names)):
            raise ValueError(f"duplicate class names in task {self.name!r}")
        if len(self.class_names) < 1:
            raise ValueError(f"task {self.name!r} has no classes")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def index_of(self, class_name: str) -> int:
        return self.class_names.index(class_name)


@dataclass(frozen=True)
class TaskRegistry:
    """Ordered set of tasks shared by a dataset and its evaluation."""

    tasks: tuple[TaskSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        names = [t.name for t in self.tasks]
        if len(names) != len(set(names)):
            raise ValueError("duplicate task names")

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]

    def get(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"unknown task {name!r}")

    def to_dict(self) -> list[dict]:
        return [{"name": t.name, "classes": list(t.class_names)} for t in self.tasks]

    @staticmethod
    def from_dict(items: list[dict]) -> "TaskRegistry":
        return TaskRegistry(
            tuple(TaskSpec(d["name"], tuple(d["classes"])) for d in items)
        )


# The synthetic shapes benchmark: five tasks on every image,
# class counts 5 / 7 / 3 / 4 / 3 (Cartesian product of 1260 variations).
SHAPE_NAMES = ("circle", "triangle", "diamond", "pentagon", "hexagon")
COLOR_NAMES = ("violet", "indigo", "blue", "green", "yellow", "orange", "red")
SIZE_NAMES = ("small", "medium", "large")
LOCATION_NAMES = ("quadrant1", "quadrant2", "quadrant3", "quadrant4")
BACKGROUND_NAMES = ("white", "black", "colored")

SHAPES_REGISTRY = TaskRegistry(
    (
        TaskSpec("shape", SHAPE_NAMES),
        TaskSpec("color", COLOR_NAMES),
        TaskSpec("size", SIZE_NAMES),
        TaskSpec("location", LOCATION_NAMES),
        TaskSpec("background", BACKGROUND_NAMES),
    )
)

# Colored MNIST: digit plus foreground / background color tasks.
MNIST_COLOR_NAMES = (
    "red", "green", "blue", "yellow", "cyan",
    "magenta", "orange", "purple", "pink", "brown",
)

MNIST_REGISTRY = TaskRegistry(
    (
        TaskSpec("digit", tuple(str(d) for d in range(10))),
        TaskSpec("fgcolor", MNIST_COLOR_NAMES),
        TaskSpec("bgcolor", MNIST_COLOR_NAMES),
    )
)

"""Robot description files: a small XML dialect describing a quadruped kinematic tree.

Example::

    <robot name="pup">
      <meta knee_config="0" base="base"/>
      <link name="base" mass="0.5" offset="0 0 0"/>
      <link name="FL_hip" mass="0.02" offset="0.15 0.04 0"/>
      <joint name="FL_haa" parent="base" child="FL_hip" effort="0.4"
             actuated="true" leg="FL" role="haa"/>
      ...
    </robot>

A link's ``offset`` is the position of its parent joint frame expressed in the
parent link frame.  Legs and chain roles are explicit attributes.
"""

from __future__ import annotations

import math
import xml.parsers.expat
from dataclasses import dataclass, field
from typing import Iterable

LEGS = ("FL", "FR", "RL", "RR")
ROLES = ("haa", "hfe", "kfe")
_LEG_VALUES = LEGS + ("none",)
_ROLE_VALUES = ROLES + ("none",)


class DescriptionError(ValueError):
    pass


class DescriptionSyntaxError(DescriptionError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SemanticError(DescriptionError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class LinkSpec:
    name: str
    mass: float
    parent_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class JointSpec:
    name: str
    parent: str
    child: str
    effort_limit: float = 0.0
    actuated: bool = False
    leg_label: str = "none"
    chain_role: str = "none"


@dataclass(frozen=True)
class RobotDescription:
    name: str
    links: tuple[LinkSpec, ...]
    joints: tuple[JointSpec, ...]
    knee_config: int
    base_link: str
    _by_name: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_name", {l.name: l for l in self.links})

    def link(self, name: str) -> LinkSpec:
        return self._by_name[name]

    @property
    def actuated_joints(self) -> list[JointSpec]:
        return [j for j in self.joints if j.actuated]

    def leg_joint(self, leg: str, role: str) -> JointSpec | None:
        found = [j for j in self.joints if j.leg_label == leg and j.chain_role == role]
        return found[0] if len(found) == 1 else None

    def child_joints(self, link: str) -> list[JointSpec]:
        return [j for j in self.joints if j.parent == link]

    def base_position(self, link: str) -> tuple[float, float, float]:
        """Position of ``link``'s frame in the base frame (offsets summed root-to-link)."""
        parent_of = {j.child: j.parent for j in self.joints}
        x = y = z = 0.0
        seen = set()
        name = link
        while name != self.base_link:
            if name in seen or name not in parent_of:
                raise DescriptionError(f"link {link!r} is not connected to the base")
            seen.add(name)
            ox, oy, oz = self.link(name).parent_offset
            x, y, z = x + ox, y + oy, z + oz
            name = parent_of[name]
        return x, y, z


# parsing ------------------------------------------------------------------------


def _number(raw: str, what: str, line: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise DescriptionSyntaxError(f"{what}: {raw!r} is not a number", line) from None
    if not math.isfinite(value):
        raise DescriptionSyntaxError(f"{what}: {raw!r} is not finite", line)
    return value


def _require(attrs: dict, key: str, element: str, line: int) -> str:
    if key not in attrs:
        raise DescriptionSyntaxError(f"<{element}> missing attribute {key!r}", line)
    return attrs[key].strip()


class _Collector:
    def __init__(self, parser):
        self.parser = parser
        self.depth = 0
        self.name = None
        self.meta = None
        self.links: list[LinkSpec] = []
        self.joints: list[JointSpec] = []

    def start(self, tag, attrs):
        line = self.parser.CurrentLineNumber
        self.depth += 1
        if self.depth == 1:
            if tag != "robot":
                raise DescriptionSyntaxError(f"root element must be <robot>, got <{tag}>", line)
            self.name = _require(attrs, "name", "robot", line)
            return
        if self.depth > 2:
            raise DescriptionSyntaxError(f"<{tag}> may not be nested inside another element", line)
        if tag == "link":
            self.links.append(self._link(attrs, line))
        elif tag == "joint":
            self.joints.append(self._joint(attrs, line))
        elif tag == "meta":
            if self.meta is not None:
                raise DescriptionSyntaxError("duplicate <meta> element", line)
            knee = _require(attrs, "knee_config", "meta", line)
            if knee not in ("0", "1"):
                raise DescriptionSyntaxError(f"knee_config must be 0 or 1, got {knee!r}", line)
            self.meta = (int(knee), _require(attrs, "base", "meta", line))
        else:
            raise DescriptionSyntaxError(f"unknown element <{tag}>", line)

    def end(self, tag):
        self.depth -= 1

    def _link(self, attrs, line) -> LinkSpec:
        name = _require(attrs, "name", "link", line)
        mass = _number(_require(attrs, "mass", "link", line), f"link {name!r} mass", line)
        parts = attrs.get("offset", "0 0 0").split()
        if len(parts) != 3:
            raise DescriptionSyntaxError(f"link {name!r} offset needs 3 components", line)
        offset = tuple(_number(p, f"link {name!r} offset", line) for p in parts)
        return LinkSpec(name, mass, offset)

    def _joint(self, attrs, line) -> JointSpec:
        name = _require(attrs, "name", "joint", line)
        actuated = attrs.get("actuated", "false").strip()
        if actuated not in ("true", "false"):
            raise DescriptionSyntaxError(f"joint {name!r} actuated must be true|false", line)
        leg = attrs.get("leg", "none").strip()
        if leg not in _LEG_VALUES:
            raise DescriptionSyntaxError(f"joint {name!r} has unknown leg {leg!r}", line)
        role = attrs.get("role", "none").strip()
        if role not in _ROLE_VALUES:
            raise DescriptionSyntaxError(f"joint {name!r} has unknown role {role!r}", line)
        effort = _number(attrs.get("effort", "0"), f"joint {name!r} effort", line)
        return JointSpec(
            name=name,
            parent=_require(attrs, "parent", "joint", line),
            child=_require(attrs, "child", "joint", line),
            effort_limit=effort,
            actuated=actuated == "true",
            leg_label=leg,
            chain_role=role,
        )


def parse_robot_description(text: str) -> RobotDescription:
    """Parse and validate a description document.

    Raises DescriptionSyntaxError (with a line number) for malformed documents and
    SemanticError listing every violated tree/leg rule otherwise.
    """
    parser = xml.parsers.expat.ParserCreate()
    collector = _Collector(parser)
    parser.StartElementHandler = collector.start
    parser.EndElementHandler = collector.end
    try:
        parser.Parse(text, True)
    except xml.parsers.expat.ExpatError as exc:
        raise DescriptionSyntaxError(xml.parsers.expat.ErrorString(exc.code), exc.lineno) from None
    if collector.name is None:
        raise DescriptionSyntaxError("empty document", 1)
    if collector.meta is None:
        raise DescriptionSyntaxError("missing <meta knee_config=... base=...> element",
                                     parser.CurrentLineNumber)
    knee, base = collector.meta
    desc = RobotDescription(
        name=collector.name,
        links=tuple(sorted(collector.links, key=lambda l: l.name)),
        joints=tuple(sorted(collector.joints, key=lambda j: j.name)),
        knee_config=knee,
        base_link=base,
    )
    violations = validate_tree(desc)
    if violations:
        raise SemanticError(violations)
    return desc


def load_robot_description(path) -> RobotDescription:
    with open(path, encoding="utf-8") as fh:
        return parse_robot_description(fh.read())


def validate_tree(desc: RobotDescription) -> list[str]:
    """Every violated invariant as a message naming the element and the rule."""
    out: list[str] = []
    link_names = [l.name for l in desc.links]
    links = set(link_names)
    for name in sorted({n for n in link_names if link_names.count(n) > 1}):
        out.append(f"link {name!r}: duplicate name")
    joint_names = [j.name for j in desc.joints]
    for name in sorted({n for n in joint_names if joint_names.count(n) > 1}):
        out.append(f"joint {name!r}: duplicate name")

    for l in desc.links:
        if not (math.isfinite(l.mass) and l.mass >= 0.0):
            out.append(f"link {l.name!r}: mass must be finite and non-negative")
        if not all(math.isfinite(c) for c in l.parent_offset):
            out.append(f"link {l.name!r}: offset must be finite")

    if desc.knee_config not in (0, 1):
        out.append(f"robot {desc.name!r}: knee_config must be 0 or 1")
    if desc.base_link not in links:
        out.append(f"meta: base link {desc.base_link!r} does not exist")

    parents: dict[str, list[str]] = {}
    for j in desc.joints:
        for end in ("parent", "child"):
            if getattr(j, end) not in links:
                out.append(f"joint {j.name!r}: {end} link {getattr(j, end)!r} does not exist")
        if j.actuated and not j.effort_limit > 0.0:
            out.append(f"joint {j.name!r}: actuated joint needs effort > 0")
        parents.setdefault(j.child, []).append(j.name)

    for child, names in sorted(parents.items()):
        if len(names) > 1:
            out.append(f"link {child!r}: has multiple parent joints {sorted(names)}")
    if desc.base_link in parents:
        out.append(f"link {desc.base_link!r}: base link may not have a parent joint")
    for name in sorted(links - set(parents) - {desc.base_link}):
        out.append(f"link {name!r}: not attached to the tree (second root)")

    out.extend(_cycle_violations(desc, links))
    out.extend(_leg_violations(desc))
    return out


def _cycle_violations(desc: RobotDescription, links: set[str]) -> list[str]:
    parent_of = {}
    for j in desc.joints:
        parent_of.setdefault(j.child, (j.parent, j.name))
    out = []
    reported = set()
    for start in sorted(links):
        path = []
        name = start
        while name in parent_of and name not in path:
            path.append(name)
            name = parent_of[name][0]
        if name in path:
            cycle = tuple(sorted(path[path.index(name):]))
            if cycle not in reported:
                reported.add(cycle)
                out.append(f"joint {parent_of[name][1]!r}: closes a cycle through links {list(cycle)}")
    return out


def _leg_violations(desc: RobotDescription) -> list[str]:
    out = []
    for leg in LEGS:
        for role in ROLES:
            found = [j for j in desc.joints if j.leg_label == leg and j.chain_role == role]
            if not found:
                out.append(f"leg {leg}: missing {role} joint")
            elif len(found) > 1:
                out.append(f"leg {leg}: {len(found)} {role} joints ({sorted(j.name for j in found)})")
        chain = [desc.leg_joint(leg, r) for r in ROLES]
        for upper, lower in zip(chain, chain[1:]):
            if upper is not None and lower is not None and lower.parent != upper.child:
                out.append(f"leg {leg}: joint {lower.name!r} ({lower.chain_role}) does not "
                           f"follow {upper.name!r} ({upper.chain_role})")
    for j in desc.joints:
        if j.chain_role != "none" and j.leg_label == "none":
            out.append(f"joint {j.name!r}: role {j.chain_role} requires a leg label")
    return out


# writing ------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize(desc: RobotDescription) -> str:
    lines = [f'<robot name="{desc.name}">',
             f'  <meta knee_config="{desc.knee_config}" base="{desc.base_link}"/>']
    for l in desc.links:
        off = " ".join(_fmt(c) for c in l.parent_offset)
        lines.append(f'  <link name="{l.name}" mass="{_fmt(l.mass)}" offset="{off}"/>')
    for j in desc.joints:
        lines.append(
            f'  <joint name="{j.name}" parent="{j.parent}" child="{j.child}" '
            f'effort="{_fmt(j.effort_limit)}" actuated="{"true" if j.actuated else "false"}" '
            f'leg="{j.leg_label}" role="{j.chain_role}"/>')
    lines.append("</robot>")
    return "\n".join(lines) + "\n"


def build_quadruped(name: str, *, stance_length: float, stance_width: float, hip_offset: float,
                    thigh: float, shank: float, total_mass: float, trunk_ratio: float,
                    effort: float, knee_config: int, dummy_mass: float = 0.001) -> RobotDescription:
    """Symmetric four-legged tree: base -> hip -> thigh -> shank -> foot per leg.

    The base carries ``trunk_ratio`` of ``total_mass``; the remainder is split over
    hip/thigh/shank links.  Feet and an IMU link get ``dummy_mass`` (below the
    sensor filter). All twelve chain joints are actuated with the same effort.
    """
    leg_share = total_mass * (1.0 - trunk_ratio) / 4.0
    split = (0.30, 0.45, 0.25)
    links = [LinkSpec("base", total_mass * trunk_ratio, (0.0, 0.0, 0.0)),
             LinkSpec("imu", dummy_mass, (0.0, 0.0, 0.05))]
    joints = [JointSpec("imu_mount", "base", "imu")]
    for leg in LEGS:
        sx = 1.0 if leg[0] == "F" else -1.0
        sy = 1.0 if leg[1] == "L" else -1.0
        frames = [
            ("hip", (sx * stance_length / 2.0, sy * stance_width / 2.0, 0.0)),
            ("thigh", (0.0, sy * hip_offset, 0.0)),
            ("shank", (0.0, 0.0, -thigh)),
        ]
        parent = "base"
        for (part, offset), frac, role in zip(frames, split, ROLES):
            child = f"{leg}_{part}"
            links.append(LinkSpec(child, leg_share * frac, offset))
            joints.append(JointSpec(f"{leg}_{role}", parent, child, effort, True, leg, role))
            parent = child
        links.append(LinkSpec(f"{leg}_foot", dummy_mass, (0.0, 0.0, -shank)))
        joints.append(JointSpec(f"{leg}_foot_fixed", parent, f"{leg}_foot", 0.0, False, leg, "none"))
    return RobotDescription(
        name=name,
        links=tuple(sorted(links, key=lambda l: l.name)),
        joints=tuple(sorted(joints, key=lambda j: j.name)),
        knee_config=int(knee_config),
        base_link="base",
    )


def leg_chain(desc: RobotDescription, leg: str) -> Iterable[JointSpec | None]:
    return tuple(desc.leg_joint(leg, role) for role in ROLES)

"""Grid road network: intersections, directed links, movements, routes.

Compass sides are N=0, E=1, S=2, W=3.  A link "approaches" an intersection
on the side it arrives from (traffic entering from the west side is the
westbound approach).  Every approach carries three movement-dedicated
lanes: 0=left, 1=straight, 2=right.
"""

from __future__ import annotations

from dataclasses import dataclass, field

NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
SIDES = (NORTH, EAST, SOUTH, WEST)
SIDE_NAMES = ("N", "E", "S", "W")

LEFT, STRAIGHT, RIGHT = 0, 1, 2
MOVEMENTS = (LEFT, STRAIGHT, RIGHT)
MOVEMENT_NAMES = ("L", "S", "R")
NO_MOVEMENT = -1  # exit links have no downstream turn

LANES_PER_APPROACH = 3


def opposite(side: int) -> int:
    return (side + 2) % 4


def exit_side(approach: int, movement: int) -> int:
    """Side of the intersection a movement departs through.

    Traffic arriving from `approach` heads toward opposite(approach);
    left/straight/right are relative to that heading.
    """
    heading = opposite(approach)
    if movement == LEFT:
        return (heading - 1) % 4
    if movement == STRAIGHT:
        return heading
    if movement == RIGHT:
        return (heading + 1) % 4
    raise ValueError(f"bad movement {movement}")


@dataclass(frozen=True)
class Link:
    """One directed roadway of `length` meters with 3 lanes."""

    lid: int
    length: float
    from_inter: int  # -1 when fed by a boundary source
    to_inter: int  # -1 when draining to a boundary sink
    approach: int  # side of to_inter this link arrives at (-1 for sinks)
    depart_side: int  # side of from_inter it leaves through (-1 for sources)

    @property
    def is_entry(self) -> bool:
        return self.from_inter < 0

    @property
    def is_exit(self) -> bool:
        return self.to_inter < 0


@dataclass
class RoadNetwork:
    rows: int
    cols: int
    link_length: float
    speed_limit: float
    detection_range: float = 150.0
    links: list[Link] = field(default_factory=list)
    # out_links[inter][side] / in_links[inter][side] -> link id
    out_links: list[list[int]] = field(default_factory=list)
    in_links: list[list[int]] = field(default_factory=list)
    entry_links: list[int] = field(default_factory=list)

    @property
    def n_intersections(self) -> int:
        return self.rows * self.cols

    @property
    def n_link_pairs(self) -> int:
        return len(self.links) // 2

    def inter_id(self, row: int, col: int) -> int:
        return row * self.cols + col


def build_grid(rows: int, cols: int, link_length: float, speed_limit: float,
               detection_range: float = 150.0) -> RoadNetwork:
    """Build a rows x cols signalized grid with source/sink boundary links.

    Intersection ids are row-major.  Every intersection ends up with exactly
    4 incoming and 4 outgoing links (neighbors or boundary sources/sinks).
    """
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be >= 1")
    if link_length <= 0 or speed_limit <= 0:
        raise ValueError("link_length and speed_limit must be positive")
    if not 0 < detection_range < link_length:
        raise ValueError("require link_length > detection_range > 0")

    net = RoadNetwork(rows, cols, link_length, speed_limit, detection_range)
    n = rows * cols
    net.out_links = [[-1] * 4 for _ in range(n)]
    net.in_links = [[-1] * 4 for _ in range(n)]

    def neighbor(r: int, c: int, side: int):
        dr, dc = ((-1, 0), (0, 1), (1, 0), (0, -1))[side]
        rr, cc = r + dr, c + dc
        if 0 <= rr < rows and 0 <= cc < cols:
            return rr * cols + cc
        return -1

    def add_link(from_inter: int, to_inter: int, depart: int, approach: int) -> int:
        lid = len(net.links)
        net.links.append(Link(lid, link_length, from_inter, to_inter,
                              approach, depart))
        if from_inter >= 0:
            net.out_links[from_inter][depart] = lid
        if to_inter >= 0:
            net.in_links[to_inter][approach] = lid
        if from_inter < 0:
            net.entry_links.append(lid)
        return lid

    for r in range(rows):
        for c in range(cols):
            x = r * cols + c
            for side in SIDES:
                nb = neighbor(r, c, side)
                if nb < 0:
                    # boundary: sink out of x, source into x, both on `side`
                    add_link(x, -1, side, -1)
                    add_link(-1, x, -1, side)
                else:
                    # one directed link per ordered pair; created from x only
                    add_link(x, nb, side, opposite(side))
    return net


def sample_route(net: RoadNetwork, entry_lid: int, rng, turn_probs) -> list[tuple[int, int, int]]:
    """Draw a route as (link_id, movement, lane) hops from an entry link.

    The movement is the turn taken at the link's downstream intersection
    and fixes the lane occupied on that link (no lane changing).  Exit
    links get NO_MOVEMENT and the straight lane.  A hop cap forces
    straight-ahead driving if the random turn walk overstays, so routes
    always terminate.
    """
    probs = (turn_probs[LEFT], turn_probs[STRAIGHT], turn_probs[RIGHT])
    hops: list[tuple[int, int, int]] = []
    lid = entry_lid
    max_turn_hops = 6 * (net.rows + net.cols) + 8
    while True:
        link = net.links[lid]
        if link.is_exit:
            hops.append((lid, NO_MOVEMENT, STRAIGHT))
            return hops
        if len(hops) < max_turn_hops:
            movement = int(rng.choice(3, p=probs))
        else:
            movement = STRAIGHT
        hops.append((lid, movement, movement))
        nxt = net.out_links[link.to_inter][exit_side(link.approach, movement)]
        lid = nxt

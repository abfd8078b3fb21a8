//! Manhattan road grid and VUE-pair mobility.
//!
//! The map is a square of side `side_length` crossed by `intersections_per_axis`
//! evenly spaced horizontal and vertical roads. Every road carries two lanes,
//! one per direction, offset by half a lane width from the road centre line
//! (right-hand traffic). Vehicles live on lane centre lines and are located by
//! a `(lane, offset)` pair, where the offset is the distance travelled from the
//! lane's entry at the map boundary.
//!
//! The receiver (vRx) drives the grid; the transmitter (vTx) is recomputed
//! every step as the point exactly `following_distance` metres behind it along
//! the receiver's own route, so the pair stays together through turns.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offsets closer than this are treated as the same point on a lane.
const LANE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMap {
    /// Side of the square coverage region, metres.
    pub side_length: f64,
    /// Width of one lane, metres.
    pub lane_width: f64,
    /// Roads per axis; the grid has this many squared intersections.
    pub intersections_per_axis: usize,
}

impl Default for GridMap {
    fn default() -> Self {
        Self { side_length: 250.0, lane_width: 4.0, intersections_per_axis: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    East,
    North,
    West,
    South,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::East, Heading::North, Heading::West, Heading::South];

    pub fn left(self) -> Heading {
        match self {
            Heading::East => Heading::North,
            Heading::North => Heading::West,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
        }
    }

    pub fn right(self) -> Heading {
        self.left().reverse()
    }

    pub fn reverse(self) -> Heading {
        self.left().left()
    }

    /// Unit direction of travel.
    pub fn unit(self) -> (f64, f64) {
        match self {
            Heading::East => (1.0, 0.0),
            Heading::North => (0.0, 1.0),
            Heading::West => (-1.0, 0.0),
            Heading::South => (0.0, -1.0),
        }
    }

    pub fn is_horizontal(self) -> bool {
        matches!(self, Heading::East | Heading::West)
    }
}

/// One directed lane. `road` indexes the horizontal roads for east/west lanes
/// and the vertical roads for north/south lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lane {
    pub heading: Heading,
    pub road: usize,
}

impl Lane {
    pub fn new(heading: Heading, road: usize) -> Self {
        Self { heading, road }
    }

    /// True when both lanes belong to the same physical road.
    pub fn same_road(self, other: Lane) -> bool {
        self.road == other.road && self.heading.is_horizontal() == other.heading.is_horizontal()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanePosition {
    pub lane: Lane,
    pub offset: f64,
}

impl GridMap {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.side_length > 0.0 && self.side_length.is_finite()) {
            errors.push(format!("map side_length must be positive, got {}", self.side_length));
        }
        if !(self.lane_width > 0.0) {
            errors.push(format!("lane_width must be positive, got {}", self.lane_width));
        }
        if self.intersections_per_axis == 0 {
            errors.push("intersections_per_axis must be at least 1".into());
        } else if self.lane_width >= self.road_spacing() {
            errors.push("lane_width must be smaller than the road spacing".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn road_spacing(&self) -> f64 {
        self.side_length / (self.intersections_per_axis + 1) as f64
    }

    /// Centre-line coordinate of road `road` (y for horizontal roads, x for vertical ones).
    pub fn road_coordinate(&self, road: usize) -> f64 {
        self.side_length * (road + 1) as f64 / (self.intersections_per_axis + 1) as f64
    }

    /// Every directed lane on the map.
    pub fn lanes(&self) -> impl Iterator<Item = Lane> + '_ {
        Heading::ALL
            .into_iter()
            .flat_map(move |h| (0..self.intersections_per_axis).map(move |r| Lane::new(h, r)))
    }

    /// The constant coordinate of a lane's centre line.
    fn lane_line(&self, lane: Lane) -> f64 {
        let road = self.road_coordinate(lane.road);
        let half = self.lane_width / 2.0;
        match lane.heading {
            Heading::East => road - half,
            Heading::West => road + half,
            Heading::North => road + half,
            Heading::South => road - half,
        }
    }

    pub fn lane_point(&self, lane: Lane, offset: f64) -> Point {
        let line = self.lane_line(lane);
        let s = self.side_length;
        match lane.heading {
            Heading::East => Point::new(offset, line),
            Heading::West => Point::new(s - offset, line),
            Heading::North => Point::new(line, offset),
            Heading::South => Point::new(line, s - offset),
        }
    }

    /// Projects `p` onto the travel axis of `lane`.
    pub fn lane_offset_of(&self, lane: Lane, p: Point) -> f64 {
        let s = self.side_length;
        match lane.heading {
            Heading::East => p.x,
            Heading::West => s - p.x,
            Heading::North => p.y,
            Heading::South => s - p.y,
        }
    }

    /// Offset along `lane` at which it crosses the centre line of the perpendicular `other`.
    fn crossing_offset(&self, lane: Lane, other: Lane) -> f64 {
        let line = self.lane_line(other);
        let p = if other.heading.is_horizontal() {
            Point::new(0.0, line)
        } else {
            Point::new(line, 0.0)
        };
        // Only the component along `lane`'s axis matters.
        match lane.heading {
            Heading::East => p.x,
            Heading::West => self.side_length - p.x,
            Heading::North => p.y,
            Heading::South => self.side_length - p.y,
        }
    }

    /// Centre of the intersection between two perpendicular roads.
    pub fn intersection(&self, a: Lane, b: Lane) -> Option<Point> {
        if a.heading.is_horizontal() == b.heading.is_horizontal() {
            return None;
        }
        let (h, v) = if a.heading.is_horizontal() { (a, b) } else { (b, a) };
        Some(Point::new(self.road_coordinate(v.road), self.road_coordinate(h.road)))
    }

    pub fn position_valid(&self, pos: LanePosition) -> bool {
        pos.lane.road < self.intersections_per_axis
            && pos.offset.is_finite()
            && pos.offset >= -LANE_EPS
            && pos.offset <= self.side_length + LANE_EPS
    }

    /// True if `p` lies on some lane centre line inside the map.
    pub fn is_on_lane(&self, p: Point, tol: f64) -> bool {
        let inside = |v: f64| v >= -tol && v <= self.side_length + tol;
        if !(inside(p.x) && inside(p.y)) {
            return false;
        }
        self.lanes().any(|lane| {
            let line = self.lane_line(lane);
            if lane.heading.is_horizontal() {
                (p.y - line).abs() <= tol
            } else {
                (p.x - line).abs() <= tol
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Turn {
    Straight,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnProbabilities {
    pub straight: f64,
    pub left: f64,
    pub right: f64,
}

impl Default for TurnProbabilities {
    fn default() -> Self {
        Self { straight: 0.5, left: 0.25, right: 0.25 }
    }
}

impl TurnProbabilities {
    pub fn validate(&self) -> Result<()> {
        let all = [self.straight, self.left, self.right];
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(vec![format!(
                "turn probabilities must be in [0, 1] and sum to 1, got {all:?}"
            )]));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Turn {
        let u: f64 = rng.random();
        if u < self.straight {
            Turn::Straight
        } else if u < self.straight + self.left {
            Turn::Left
        } else {
            Turn::Right
        }
    }
}

/// What a vehicle does when its lane reaches the map edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryBehavior {
    /// Reverse onto the opposite lane of the same road.
    #[default]
    UTurn,
    /// Re-enter the same lane at the opposite edge.
    Wrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilityRules {
    #[serde(default)]
    pub turns: TurnProbabilities,
    #[serde(default)]
    pub boundary: BoundaryBehavior,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TrailSegment {
    lane: Lane,
    start: f64,
    end: f64,
}

impl TrailSegment {
    fn length(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PendingTurn {
    at: f64,
    to: Lane,
}

/// Location of one VUE-pair: the receiver, and the transmitter trailing it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPose {
    rx: LanePosition,
    tx: LanePosition,
    rx_point: Point,
    tx_point: Point,
    following_distance: f64,
    /// Offset at which the receiver entered its current lane.
    segment_start: f64,
    /// Completed route segments, oldest first; trimmed to what the transmitter still needs.
    trail: Vec<TrailSegment>,
    /// Index into `trail` of the transmitter's segment, `None` when it shares the receiver's.
    tx_segment: Option<usize>,
    pending_turn: Option<PendingTurn>,
}

impl PairPose {
    /// Places the receiver at `offset` on `lane`, with the transmitter behind it on the same lane.
    pub fn new(map: &GridMap, lane: Lane, offset: f64, following_distance: f64) -> Result<Self> {
        if !(following_distance > 0.0) {
            return Err(Error::InvalidState(format!(
                "following distance must be positive, got {following_distance}"
            )));
        }
        let rx = LanePosition { lane, offset };
        if !map.position_valid(rx) {
            return Err(Error::InvalidState(format!("receiver off-lane: {rx:?}")));
        }
        if offset + LANE_EPS < following_distance {
            return Err(Error::InvalidState(format!(
                "receiver offset {offset} leaves no room for a transmitter {following_distance} m behind"
            )));
        }
        let mut pose = Self {
            rx,
            tx: rx,
            rx_point: map.lane_point(lane, offset),
            tx_point: map.lane_point(lane, offset),
            following_distance,
            segment_start: 0.0,
            trail: Vec::new(),
            tx_segment: None,
            pending_turn: None,
        };
        pose.locate_tx(map)?;
        Ok(pose)
    }

    /// A pose with a uniformly random lane and receiver offset.
    pub fn random<R: Rng + ?Sized>(map: &GridMap, following_distance: f64, rng: &mut R) -> Result<Self> {
        let heading = Heading::ALL[rng.random_range(0..4)];
        let road = rng.random_range(0..map.intersections_per_axis);
        let lo = following_distance.min(map.side_length);
        let offset = lo + (map.side_length - lo) * rng.random::<f64>();
        Self::new(map, Lane::new(heading, road), offset, following_distance)
    }

    pub fn rx(&self) -> Point {
        self.rx_point
    }

    pub fn tx(&self) -> Point {
        self.tx_point
    }

    pub fn rx_position(&self) -> LanePosition {
        self.rx
    }

    pub fn tx_position(&self) -> LanePosition {
        self.tx
    }

    /// Heading of the receiver.
    pub fn heading(&self) -> Heading {
        self.rx.lane.heading
    }

    /// Lane of the receiver.
    pub fn lane(&self) -> Lane {
        self.rx.lane
    }

    pub fn following_distance(&self) -> f64 {
        self.following_distance
    }

    /// Route distance from the transmitter to the receiver, summed over the recorded segments.
    pub fn path_distance(&self) -> f64 {
        match self.tx_segment {
            None => self.rx.offset - self.tx.offset,
            Some(i) => {
                let mut d = self.trail[i].end - self.tx.offset;
                d += self.trail[i + 1..].iter().map(TrailSegment::length).sum::<f64>();
                d + (self.rx.offset - self.segment_start)
            }
        }
    }

    pub fn validate(&self, map: &GridMap) -> Result<()> {
        for (who, pos) in [("receiver", self.rx), ("transmitter", self.tx)] {
            if !map.position_valid(pos) {
                return Err(Error::InvalidState(format!("{who} off-lane: {pos:?}")));
            }
        }
        Ok(())
    }

    /// Walks back `following_distance` along the route to place the transmitter.
    fn locate_tx(&mut self, map: &GridMap) -> Result<()> {
        let mut remaining = self.following_distance;
        let current = self.rx.offset - self.segment_start;
        let (tx, seg) = if current + LANE_EPS >= remaining {
            let offset = (self.rx.offset - remaining).max(self.segment_start);
            (LanePosition { lane: self.rx.lane, offset }, None)
        } else {
            remaining -= current;
            let mut found = None;
            for (i, seg) in self.trail.iter().enumerate().rev() {
                if seg.length() + LANE_EPS >= remaining {
                    let offset = (seg.end - remaining).max(seg.start);
                    found = Some((LanePosition { lane: seg.lane, offset }, Some(i)));
                    break;
                }
                remaining -= seg.length();
            }
            found.ok_or_else(|| Error::InvalidState("route history shorter than following distance".into()))?
        };
        self.tx = tx;
        self.tx_point = map.lane_point(tx.lane, tx.offset);
        if let Some(i) = seg {
            if i > 0 {
                self.trail.drain(..i);
            }
            self.tx_segment = Some(0);
        } else {
            self.trail.clear();
            self.tx_segment = None;
        }
        Ok(())
    }

    fn enter_lane(&mut self, map: &GridMap, at: f64, lane: Lane, offset: f64) {
        self.trail.push(TrailSegment { lane: self.rx.lane, start: self.segment_start, end: at });
        self.rx = LanePosition { lane, offset };
        self.segment_start = offset;
        self.rx_point = map.lane_point(lane, offset);
        self.pending_turn = None;
    }
}

enum Event {
    Pending(PendingTurn),
    Decision { road: usize },
    LaneEnd,
}

/// Next event strictly ahead of the receiver on its current lane.
fn next_event(pose: &PairPose, map: &GridMap) -> (f64, Event) {
    let lane = pose.rx.lane;
    let here = pose.rx.offset;
    let mut best = (map.side_length, Event::LaneEnd);
    if let Some(p) = pose.pending_turn {
        if p.at > here + LANE_EPS && p.at < best.0 {
            best = (p.at, Event::Pending(p));
        }
    }
    for road in 0..map.intersections_per_axis {
        let left = Lane::new(lane.heading.left(), road);
        let right = Lane::new(lane.heading.right(), road);
        let at = map.crossing_offset(lane, left).min(map.crossing_offset(lane, right));
        if at > here + LANE_EPS && at < best.0 {
            best = (at, Event::Decision { road });
        }
    }
    best
}

/// Advances the pair by `speed * dt` metres along the grid.
///
/// The receiver picks straight/left/right at each intersection it reaches
/// according to `rules.turns`; the transmitter follows its route.
pub fn step_mobility<R: Rng + ?Sized>(
    pose: &PairPose,
    map: &GridMap,
    rules: &MobilityRules,
    speed: f64,
    dt: f64,
    rng: &mut R,
) -> Result<PairPose> {
    pose.validate(map)?;
    if !(speed >= 0.0 && dt >= 0.0) {
        return Err(Error::InvalidState(format!("speed and dt must be non-negative, got {speed}, {dt}")));
    }
    let mut next = pose.clone();
    let mut remaining = speed * dt;
    if remaining == 0.0 {
        return Ok(next);
    }
    loop {
        let (at, event) = next_event(&next, map);
        let gap = at - next.rx.offset;
        if gap > remaining {
            next.rx.offset += remaining;
            next.rx_point = map.lane_point(next.rx.lane, next.rx.offset);
            break;
        }
        remaining -= gap;
        next.rx.offset = at;
        next.rx_point = map.lane_point(next.rx.lane, at);
        match event {
            Event::Pending(turn) => {
                let offset = map.lane_offset_of(turn.to, next.rx_point);
                next.enter_lane(map, at, turn.to, offset);
            }
            Event::Decision { road } => {
                let heading = next.rx.lane.heading;
                let target = match rules.turns.sample(rng) {
                    Turn::Straight => None,
                    Turn::Left => Some(Lane::new(heading.left(), road)),
                    Turn::Right => Some(Lane::new(heading.right(), road)),
                };
                if let Some(to) = target {
                    let turn_at = map.crossing_offset(next.rx.lane, to);
                    if (turn_at - at).abs() <= LANE_EPS {
                        let offset = map.lane_offset_of(to, next.rx_point);
                        next.enter_lane(map, at, to, offset);
                    } else {
                        next.pending_turn = Some(PendingTurn { at: turn_at, to });
                    }
                }
            }
            Event::LaneEnd => {
                let lane = next.rx.lane;
                let to = match rules.boundary {
                    BoundaryBehavior::UTurn => Lane::new(lane.heading.reverse(), lane.road),
                    BoundaryBehavior::Wrap => lane,
                };
                next.enter_lane(map, at, to, 0.0);
            }
        }
        if remaining <= 0.0 {
            break;
        }
    }
    next.locate_tx(map)?;
    Ok(next)
}

/// Propagation geometry of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Los,
    Wlos,
    Nlos,
}

/// LOS when both ends are on the same road; WLOS when they are on perpendicular
/// roads and either end is within `near_threshold` of the shared intersection;
/// NLOS otherwise.
pub fn classify_geometry(pose: &PairPose, map: &GridMap, near_threshold: f64) -> Regime {
    let (tx, rx) = (pose.tx_position().lane, pose.rx_position().lane);
    if tx.same_road(rx) {
        return Regime::Los;
    }
    match map.intersection(tx, rx) {
        Some(centre) => {
            let nearest = pose.tx().distance(centre).min(pose.rx().distance(centre));
            if nearest <= near_threshold {
                Regime::Wlos
            } else {
                Regime::Nlos
            }
        }
        None => Regime::Nlos,
    }
}

"""
Normal-guided grasp selection.
Externally generated proposals pass through a chain of filters (object
bounding box, force-closure angle test) and the best-scored survivor wins.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from gsgrasp.core.exceptions import (
    DegenerateContactsError,
    NoFeasibleGraspError,
    NoNearbySurfaceError,
    ValidationError,
)
from gsgrasp.models.domain import PointCloud
from gsgrasp.models.schemas import GraspDecision, GraspFilterConfig, GraspProposal

logger = logging.getLogger(__name__)

MIN_CONTACT_DISTANCE = 1e-6


def proposal_pose(proposal: GraspProposal) -> np.ndarray:
    return np.asarray(proposal.pose, dtype=np.float64).reshape(4, 4)


def contact_points(proposal: GraspProposal) -> np.ndarray:
    """
    (2, 3) contact points. Proposals without explicit contacts use the finger
    tips: center -/+ width/2 along the gripper's closing (y) axis.
    """
    if proposal.contacts is not None:
        return np.asarray(proposal.contacts, dtype=np.float64)
    pose = proposal_pose(proposal)
    half = 0.5 * proposal.width * pose[:3, 1]
    center = pose[:3, 3]
    return np.stack([center - half, center + half])


class SurfaceIndex:
    """Radius lookups of cloud normals around contact points."""

    def __init__(self, cloud: PointCloud) -> None:
        if cloud.normals is None:
            raise ValidationError("Grasp filtering needs a point cloud with normals")
        if len(cloud) == 0:
            raise ValidationError("Grasp filtering needs a non-empty point cloud")
        self.cloud = cloud
        self._tree = cKDTree(cloud.points)

    def normal_at(self, point: np.ndarray, radius: float, contact_index: int = 0) -> np.ndarray:
        """
        Average normal of the cloud points within `radius`, each first flipped
        into the hemisphere of the nearest-index neighbor; the result takes the
        orientation shared by the majority of the raw normals.
        """
        idx = sorted(self._tree.query_ball_point(point, r=radius))
        if not idx:
            raise NoNearbySurfaceError(contact_index, radius)
        normals = self.cloud.normals[idx]
        reference = normals[0]
        signs = np.where(normals @ reference >= 0, 1.0, -1.0)
        mean = (normals * signs[:, None]).mean(axis=0)
        if (signs < 0).sum() > (signs > 0).sum():
            mean = -mean
        return mean / np.linalg.norm(mean)


def contact_normals(
    proposal: GraspProposal,
    cloud: PointCloud,
    radius: Optional[float] = None,
    index: Optional[SurfaceIndex] = None,
) -> np.ndarray:
    """
    Unit surface normals at both contacts, shape (2, 3).

    Raises:
        NoNearbySurfaceError: a contact has no cloud point within `radius`
    """
    radius = GraspFilterConfig().normal_lookup_radius if radius is None else radius
    index = index or SurfaceIndex(cloud)
    contacts = contact_points(proposal)
    return np.stack([index.normal_at(c, radius, contact_index=i) for i, c in enumerate(contacts)])


def force_closure_feasible(
    proposal: GraspProposal,
    normals: np.ndarray,
    config: GraspFilterConfig,
) -> Tuple[bool, float]:
    """
    Angle test: the angles between the grasping line and each contact normal
    (direction-agnostic) must sum to at most the configured threshold.

    Returns:
        (feasible, angle_sum_rad)

    Raises:
        DegenerateContactsError: contacts closer than 1 micron
    """
    contacts = contact_points(proposal)
    line = contacts[1] - contacts[0]
    distance = float(np.linalg.norm(line))
    if distance < MIN_CONTACT_DISTANCE:
        raise DegenerateContactsError(distance)
    line /= distance

    normals = np.asarray(normals, dtype=np.float64)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    cosines = np.clip(np.abs(normals @ line), 0.0, 1.0)
    angle_sum = float(np.arccos(cosines).sum())
    return angle_sum <= config.angle_sum_threshold, angle_sum


# =============================================================================
# Filters (Strategy Pattern)
# =============================================================================


@dataclass
class FilterOutcome:
    passed: bool
    reason: Optional[str] = None
    angle_sum_rad: Optional[float] = None


class GraspFilter(ABC):
    """One rejection rule applied to each proposal."""

    name: str = "filter"

    @abstractmethod
    def evaluate(self, proposal: GraspProposal) -> FilterOutcome:
        pass


class BoundingBoxFilter(GraspFilter):
    """Keep grasps centered inside the queried object's box plus a margin."""

    name = "bbox"

    def __init__(self, bbox_min: np.ndarray, bbox_max: np.ndarray, margin: float = 0.02) -> None:
        self.lo = np.asarray(bbox_min, dtype=np.float64) - margin
        self.hi = np.asarray(bbox_max, dtype=np.float64) + margin

    def evaluate(self, proposal: GraspProposal) -> FilterOutcome:
        center = proposal_pose(proposal)[:3, 3]
        if np.all(center >= self.lo) and np.all(center <= self.hi):
            return FilterOutcome(passed=True)
        return FilterOutcome(passed=False, reason="outside_bbox")


class ForceClosureFilter(GraspFilter):
    """Reject grasps whose contact normals stray too far from the grasping line."""

    name = "force_closure"

    def __init__(self, cloud: PointCloud, config: GraspFilterConfig) -> None:
        self.config = config
        self.index = SurfaceIndex(cloud)

    def evaluate(self, proposal: GraspProposal) -> FilterOutcome:
        try:
            normals = contact_normals(
                proposal, self.index.cloud, self.config.normal_lookup_radius, index=self.index
            )
            feasible, angle_sum = force_closure_feasible(proposal, normals, self.config)
        except NoNearbySurfaceError as exc:
            logger.warning(exc.message, extra={"error_code": exc.error_code})
            return FilterOutcome(passed=False, reason="no_surface")
        except DegenerateContactsError as exc:
            logger.warning(exc.message, extra={"error_code": exc.error_code})
            return FilterOutcome(passed=False, reason="degenerate_contacts")
        return FilterOutcome(
            passed=feasible,
            reason=None if feasible else "angle",
            angle_sum_rad=angle_sum,
        )


@dataclass
class GraspSelection:
    best: GraspDecision
    best_index: int  # position of `best` in the input
    ranked: List[GraspDecision]  # survivors, score descending
    decisions: List[GraspDecision]  # every proposal, input order


def build_filters(
    cloud: Optional[PointCloud],
    config: GraspFilterConfig,
    bbox: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> List[GraspFilter]:
    filters: List[GraspFilter] = []
    if bbox is not None:
        filters.append(BoundingBoxFilter(bbox[0], bbox[1], margin=config.bbox_margin))
    if config.use_normal_filter:
        if cloud is None:
            raise ValidationError("The normal filter needs a point cloud")
        filters.append(ForceClosureFilter(cloud, config))
    return filters


def evaluate_proposals(
    proposals: Sequence[GraspProposal],
    filters: Sequence[GraspFilter],
) -> List[GraspDecision]:
    """
    Run every filter on every proposal. The first failing filter names the
    reason; the angle sum is reported whenever the surface lookup succeeded.
    """
    decisions = []
    for proposal in proposals:
        reason: Optional[str] = None
        angle_sum: Optional[float] = None
        for grasp_filter in filters:
            outcome = grasp_filter.evaluate(proposal)
            if outcome.angle_sum_rad is not None:
                angle_sum = outcome.angle_sum_rad
            if not outcome.passed and reason is None:
                reason = outcome.reason
        decisions.append(GraspDecision(
            **proposal.model_dump(),
            feasible=reason is None,
            angle_sum_rad=angle_sum,
            reason=reason,
        ))
    return decisions


def select_grasp(
    proposals: Sequence[GraspProposal],
    cloud: Optional[PointCloud],
    config: Optional[GraspFilterConfig] = None,
    bbox: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> GraspSelection:
    """
    Filter proposals and pick the highest-scored feasible one.
    Ties in score keep the input order.

    Raises:
        ValidationError: no proposals
        NoFeasibleGraspError: every proposal was rejected
    """
    if not proposals:
        raise ValidationError("At least one grasp proposal is required")
    config = config or GraspFilterConfig()

    decisions = evaluate_proposals(proposals, build_filters(cloud, config, bbox))
    feasible = [i for i, d in enumerate(decisions) if d.feasible]
    order = sorted(feasible, key=lambda i: -decisions[i].score)
    ranked = [decisions[i] for i in order]

    logger.info(f"Grasp filter: {len(ranked)}/{len(decisions)} proposals feasible")
    if not ranked:
        raise NoFeasibleGraspError(len(decisions))
    return GraspSelection(best=ranked[0], best_index=order[0], ranked=ranked, decisions=decisions)

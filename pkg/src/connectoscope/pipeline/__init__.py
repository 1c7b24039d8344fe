"""Manifests, splits, phantom cohorts and the command-line driver."""

from .features import FeatureConfig, build_features, class_separation
from .manifest import CohortManifest, Subject, load_manifest, write_manifest
from .phantom import PhantomSpec, generate_phantom
from .split import SplitSpec, stratified_split

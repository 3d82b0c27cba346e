from .pointcloud import (
    Episode,
    InvalidCloudError,
    ManifestEntry,
    PointCloud,
    parse_manifest_line,
    read_cloud,
    read_manifest,
    write_cloud,
    write_manifest,
)
from .protocol import (
    SCANNET_CLASSES,
    Crop,
    FoldSplit,
    InsufficientExamplesError,
    build_pool,
    class_counts,
    crop_instance,
    instance_cube,
    make_folds,
    relabel_for_split,
    sample_episode,
)
from .synth import ClassSpec, SceneSpec, default_catalog, scene_seed, synth_dataset, synth_scene

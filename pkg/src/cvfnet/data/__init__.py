"""Scene ingestion, augmentation and synthetic scene generation."""
from .augment import (IDENTITY_AUGMENTATION, AugmentationConfig, augment, build_gt_bank, flip_y,
                      gt_sample_injection, rotate_z, scale_scene)
from .kitti import (SceneSample, load_dataset, load_scene, read_bin, read_labels, read_manifest,
                    write_bin, write_labels, write_manifest, write_scene)
from .synth import SyntheticSceneSpec, scene_seed, synth_generate

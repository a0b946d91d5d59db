pub mod dataset;
pub mod kfold;
pub mod netpbm;
pub mod palette;
pub mod patches;
pub mod toy;

pub use dataset::{list_ids, patch_id, read_pair, read_pairs, read_seg_dataset, read_seg_sample, write_pair, write_patch, write_seg_sample};
pub use kfold::{kfold_split, Fold};
pub use netpbm::{read_image, read_labelmap, read_mask, write_image, write_labelmap, write_mask, RgbImage};
pub use palette::Palette;
pub use patches::{crop_offsets, extract_patches, PanoramaPair, Patch, PatchConfig, PatchSource, Patches, Rotation};
pub use toy::{
    generate_toy_scene, generate_toy_scene_pair, generate_toy_segmentation, toy_pair_dataset, toy_segmentation_dataset, Primitive, Shape, ToyPair, ToyScene,
    ToySceneConfig,
};

//! Synthetic shapes dataset and COCO-style annotation I/O.

mod coco;
mod generate;
mod image;

pub use coco::{
    generate_dataset, image_file_name, load_annotations, load_dataset, parse_annotations,
    read_png, to_coco, write_png, Annotations, CategoryMapping, CocoAnnotation, CocoCategory,
    CocoFile, CocoImage, GeneratedDataset, SampleDescriptor, ANNOTATION_FILE, IMAGE_DIR,
};
pub use generate::{generate_samples, DatasetSpec, Sample, SHAPE_NAMES};
pub use image::Image;

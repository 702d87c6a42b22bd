//! Joint semi-supervised learning of image registration and segmentation
//! at desk scale: a registration network and a segmentation network trained
//! alternately so that each supplies supervision for the other on unlabeled
//! images, on synthetic deformable-atlas data.

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod imageops;
pub mod io;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod trainer;

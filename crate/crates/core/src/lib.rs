//! Detection of GAN-based tumor injection (FM) and removal (FB) tampering
//! in CT scans with classical learners.

pub mod augment;
pub mod cohort;
pub mod dicom;
pub mod evalkit;
pub mod learners;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod seeding;
pub mod tensor;

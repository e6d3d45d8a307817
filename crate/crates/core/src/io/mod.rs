//! On-disk formats: the IVMX matrix container, model records built from
//! IVMX sub-blocks, text tables, and WAV input.

pub mod ivmx;
pub mod records;
pub mod tables;
pub mod wav;

//! Connectome datasets: matrices, file formats, synthetic generation,
//! stratified splits and Mixup.

mod io;
mod matrix;
mod mixup;
mod split;
mod synthetic;

pub use io::{
    decode_matrix_binary, encode_matrix_binary, load_dataset, manifest_json, read_matrix_binary,
    read_matrix_csv, write_dataset, write_matrix_binary, write_matrix_csv, DatasetManifest,
    SubjectRecord, DTYPE_F64, MATRIX_MAGIC,
};
pub use matrix::{
    compute_pcc, ConnectivityMatrix, TimeSeries, SYMMETRIZE_TOLERANCE, SYMMETRY_TOLERANCE,
};
pub use mixup::{mixup, one_hot, MixupSampler};
pub use split::{stratified_kfold, FoldSplit};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("block size {0} is not a power of two")]
    BlockSizeNotPowerOfTwo(u64),
    #[error("cache block count {0} is not a power of two")]
    BlockCountNotPowerOfTwo(u64),
    #[error("address space must hold at least one word")]
    EmptyAddressSpace,
    #[error("address {address} outside address space of {space} words")]
    AddressOutOfRange { address: u64, space: u64 },
    #[error("trace record {position}: {source}")]
    Trace {
        position: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("malformed trace line {line}: {reason}")]
    TraceParse { line: usize, reason: String },
    #[error("invalid class distribution: {0}")]
    Distribution(String),
    #[error("invalid process parameters: {0}")]
    Params(String),
    #[error("address space too small: layout needs more than {limit} words")]
    AddressSpaceTooSmall { limit: u64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("key {index} outside classifier domain")]
    KeyOutOfDomain { index: usize },
    #[error("float {0} outside the supported domain (finite, non-negative)")]
    FloatDomain(f64),
    #[error("key file: {0}")]
    KeyFile(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use repcount::Error;

pub const OK: u8 = 0;
pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const NUMERICAL: u8 = 4;

/// Process exit status for a failed command.
pub fn code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::NotFound(_) | Error::Image(_) | Error::CorruptDataset(_) => IO,
        Error::Csv(c) if c.is_io_error() => IO,
        Error::Json(j) if j.is_io() => IO,
        Error::Diverged { .. } | Error::Undefined(_) => NUMERICAL,
        _ => USAGE,
    }
}

use std::fmt;

/// Input the user can fix: bad flags, config files or data files. Exits 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for configuration and input-data problems, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use saver::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Argument(_)
                | E::Config(_)
                | E::Data(_)
                | E::Lookup(_)
                | E::Shape { .. }
                | E::NotATrace
                | E::UnsupportedVersion(_)
                | E::CorruptTrace(_)
                | E::Json(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

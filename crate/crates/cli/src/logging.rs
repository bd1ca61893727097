//! Line-oriented JSON logs on stderr.

use std::io::Write;

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::{json, Map, Value};

struct JsonLogger;

static LOGGER: JsonLogger = JsonLogger;

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &Record) {
        if self.enabled(record.metadata()) {
            emit(record.level(), &record.args().to_string(), Map::new());
        }
    }

    fn flush(&self) {
        let _ = std::io::stderr().flush();
    }
}

pub fn init(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(level);
}

/// Writes one log line with extra structured fields.
pub fn emit(level: Level, msg: &str, fields: Map<String, Value>) {
    if level > log::max_level() {
        return;
    }
    let mut line = Map::new();
    line.insert("level".into(), json!(level.as_str().to_ascii_lowercase()));
    line.insert("msg".into(), json!(msg));
    line.extend(fields);
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{}", Value::Object(line));
}

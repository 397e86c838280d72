use serde_json::Value;

use crate::Command;

const SESSION_COLUMNS: &[&str] =
    &["session_id", "tracer_id", "state", "event_count", "processing_time_ms", "error_detail"];
const TRACER_COLUMNS: &[&str] = &["tracer_id", "mode", "connected", "connected_at_us"];
const EVENT_COLUMNS: &[&str] = &["seq", "timestamp_ticks", "kind", "actor_id", "arg"];

pub(crate) fn table(command: &Command, body: &Value) -> String {
    match command {
        Command::Tracers => rows(TRACER_COLUMNS, body.as_array().map(Vec::as_slice).unwrap_or_default()),
        Command::Sessions => rows(SESSION_COLUMNS, body.as_array().map(Vec::as_slice).unwrap_or_default()),
        Command::Events { .. } => {
            let events = body["events"].as_array().map(Vec::as_slice).unwrap_or_default();
            rows(EVENT_COLUMNS, events)
        }
        Command::Show { .. }
        | Command::Create { .. }
        | Command::Start { .. }
        | Command::Stop { .. }
        | Command::Stats { .. } => fields(body),
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if !n.is_u64() && !n.is_i64() => format!("{f:.1}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

/// One aligned row per object, header first.
fn rows(columns: &[&str], items: &[Value]) -> String {
    let grid: Vec<Vec<String>> = std::iter::once(columns.iter().map(|c| c.to_string()).collect())
        .chain(items.iter().map(|item| columns.iter().map(|c| cell(&item[*c])).collect()))
        .collect();
    let widths: Vec<usize> =
        (0..columns.len()).map(|i| grid.iter().map(|row| row[i].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in grid {
        let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// `key value` lines for a single object, sorted by key.
fn fields(body: &Value) -> String {
    let Some(map) = body.as_object() else {
        return format!("{}\n", cell(body));
    };
    let width = map.keys().map(String::len).max().unwrap_or(0);
    map.iter().map(|(k, v)| format!("{k:<width$}  {}\n", cell(v))).collect()
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn events_render_one_row_each() {
        let body = json!({"session_id": 7, "count": 2, "events": [
            {"seq": 0, "timestamp_ticks": 10, "kind": "TASK_SWITCH", "actor_id": 1, "arg": null},
            {"seq": 1, "timestamp_ticks": 25, "kind": "ISR_ENTER", "actor_id": 32, "arg": 4},
        ]});
        let out = table(&Command::Events { session: 7, from: None, to: None, limit: None }, &body);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("seq"));
        assert!(lines[1].starts_with("0 "));
        assert!(lines[2].ends_with("4"));
    }

    #[test]
    fn objects_render_as_key_value_lines() {
        let body =
            json!({"session_id": 7, "event_count": 31726, "processing_time_ms": 2150.25, "throughput_eps": null});
        let out = table(&Command::Stats { session: 7 }, &body);
        assert!(out.lines().any(|l| l.split_whitespace().eq(["event_count", "31726"])));
        assert!(out.contains("2150.2") || out.contains("2150.3"));
        assert!(out.lines().any(|l| l.split_whitespace().eq(["throughput_eps", "-"])));
    }
}

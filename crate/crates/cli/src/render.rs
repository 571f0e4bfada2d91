//! Plain-text rendering of a JSON report.

use serde_json::Value;

fn scalar(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if !n.is_i64() && !n.is_u64() => format!("{f:.6}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn is_record_list(v: &Value) -> bool {
    matches!(v, Value::Array(items) if !items.is_empty() && items.iter().all(Value::is_object))
}

fn records(key: &str, items: &[Value], out: &mut String) {
    let Value::Object(first) = &items[0] else { return };
    let cols: Vec<&String> = first.keys().collect();
    let cells: Vec<Vec<String>> = items
        .iter()
        .map(|it| cols.iter().map(|c| it.get(c.as_str()).map_or("-".into(), scalar)).collect())
        .collect();
    let widths: Vec<usize> = cols
        .iter()
        .enumerate()
        .map(|(i, c)| cells.iter().map(|r| r[i].len()).chain([c.len()]).max().unwrap_or(0))
        .collect();
    out.push_str(&format!("\n{key}:\n"));
    let line = |vals: Vec<&str>| {
        vals.iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(&line(cols.iter().map(|c| c.as_str()).collect()));
    out.push('\n');
    for r in &cells {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
}

pub fn table(v: &Value) -> String {
    let Value::Object(map) = v else {
        return scalar(v);
    };
    let width = map.keys().map(String::len).max().unwrap_or(0);
    let mut out = String::new();
    let mut deferred = Vec::new();
    for (k, val) in map {
        match val {
            v if is_record_list(v) => deferred.push((k, v)),
            Value::Object(inner) => {
                for (ik, iv) in inner {
                    let key = format!("{k}.{ik}");
                    out.push_str(&format!("{key:<width$}  {}\n", if iv.is_object() { iv.to_string() } else { scalar(iv) }));
                }
            }
            Value::String(s) if s.contains('\n') => {
                out.push_str(&format!("{k}:\n{s}"));
            }
            other => out.push_str(&format!("{k:<width$}  {}\n", scalar(other))),
        }
    }
    for (k, v) in deferred {
        if let Value::Array(items) = v {
            records(k, items, &mut out);
        }
    }
    out.trim_end().to_string()
}

//! Dotted config overrides (`--detectors.ocsvm.budget 40`) are not known to
//! clap, so they are pulled out of argv before parsing.

/// `(dotted path, raw value)`.
pub type Override = (String, String);

/// Split argv into the arguments clap should see and `(dotted path, raw value)` pairs.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>), String> {
    let mut kept = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        if arg == "--" {
            kept.push(arg);
            kept.extend(it.by_ref());
            break;
        }
        let Some(flag) = arg.strip_prefix("--") else {
            kept.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            kept.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("override --{name} needs a value"))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((kept, overrides))
}

use clap::{ArgAction, Command};
use serde_json::{json, Value};

fn arg_schema(a: &clap::Arg) -> Value {
    let takes_value = !matches!(
        a.get_action(),
        ArgAction::SetTrue | ArgAction::SetFalse | ArgAction::Count | ArgAction::Help | ArgAction::Version
    );
    let defaults: Vec<String> = a.get_default_values().iter().map(|v| v.to_string_lossy().into_owned()).collect();
    let choices: Vec<String> = if !takes_value { Vec::new() } else { a.get_possible_values().iter().map(|v| v.get_name().to_string()).collect() };
    json!({
        "name": a.get_id().as_str(),
        "long": a.get_long(),
        "short": a.get_short().map(|c| c.to_string()),
        "help": a.get_help().map(|h| h.to_string()),
        "required": a.is_required_set(),
        "takes_value": takes_value,
        "repeatable": matches!(a.get_action(), ArgAction::Append | ArgAction::Count),
        "default": defaults.first(),
        "choices": choices,
    })
}

/// Flags of a command and, recursively, of its subcommands.
pub fn command_schema(cmd: &Command) -> Value {
    let args: Vec<Value> = cmd
        .get_arguments()
        .filter(|a| !matches!(a.get_action(), ArgAction::Help | ArgAction::Version))
        .map(arg_schema)
        .collect();
    let subs: Vec<Value> = cmd.get_subcommands().filter(|s| s.get_name() != "help").map(command_schema).collect();
    json!({
        "name": cmd.get_name(),
        "about": cmd.get_about().map(|s| s.to_string()),
        "version": cmd.get_version(),
        "args": args,
        "subcommands": subs,
    })
}

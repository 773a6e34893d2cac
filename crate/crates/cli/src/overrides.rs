//! One `--key` flag per config entry, generated from the defaults.

use abconformer::Config;
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides(pub Map<String, Value>);

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

impl FromArgMatches for ConfigOverrides {
    fn from_arg_matches(matches: &ArgMatches) -> Result<Self, clap::Error> {
        let mut map = Map::new();
        for (key, _) in Config::default().entries() {
            if let Some(v) = matches.get_one::<f64>(&key) {
                map.insert(key, Value::from(*v));
            }
        }
        Ok(ConfigOverrides(map))
    }

    fn update_from_arg_matches(&mut self, matches: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(matches)?;
        Ok(())
    }
}

impl Args for ConfigOverrides {
    fn augment_args(cmd: Command) -> Command {
        let mut cmd = cmd.next_help_heading("Config overrides");
        for (key, value) in Config::default().entries() {
            cmd = cmd.arg(
                Arg::new(key.clone())
                    .long(flag(&key))
                    .value_name("N")
                    .value_parser(clap::value_parser!(f64))
                    .help(format!("Overrides `{key}` [default: {value}]")),
            );
        }
        cmd.next_help_heading(None::<&str>)
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

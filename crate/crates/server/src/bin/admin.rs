//! Local administration of the gatekeeper store.
//!
//! ```text
//! admin add_dataset --dataset PENGUIN --locator local_path:/data/penguins.csv --metadata_path penguin.yaml
//! admin add_user_with_budget --user "Dr. Antartica" --dataset PENGUIN --epsilon 10 --delta 0.005
//! admin show_collection users
//! admin drop_user --user "Dr. Antartica"
//! ```
//!
//! The store is `--store` or `LOMAS_STORE_PATH`; every write holds the
//! store's exclusive file lock, so this is safe next to a running server.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gatekeeper_core::PrivacyBudget;
use gatekeeper_store::{AdminStore, StorageLocator};

#[derive(Parser)]
#[command(name = "admin", version, about = "Administer users, datasets and archives")]
struct Cli {
    #[arg(long, env = "LOMAS_STORE_PATH", global = true, default_value = "lomas_store.jsonl")]
    store: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grant a user an (epsilon, delta) budget on a dataset.
    #[command(name = "add_user_with_budget")]
    AddUserWithBudget {
        #[arg(long)]
        user: String,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        epsilon: String,
        #[arg(long)]
        delta: String,
    },
    /// Register a dataset with its storage locator and metadata document.
    #[command(name = "add_dataset")]
    AddDataset {
        #[arg(long)]
        dataset: String,
        /// `<kind>:<address>`, kind one of local_path, http_url, s3.
        #[arg(long)]
        locator: StorageLocator,
        #[arg(long = "metadata_path")]
        metadata_path: PathBuf,
    },
    /// Print one JSON record per line: users, datasets, metadata or archives.
    #[command(name = "show_collection")]
    ShowCollection { name: String },
    /// Remove a user and their budgets; archives are kept.
    #[command(name = "drop_user")]
    DropUser {
        #[arg(long)]
        user: String,
    },
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("records serialize")
}

fn run(cli: Cli) -> Result<Vec<String>, String> {
    let store = AdminStore::open(&cli.store).map_err(|e| format!("{}: {e}", cli.store.display()))?;
    let out = match cli.command {
        Command::AddUserWithBudget {
            user,
            dataset,
            epsilon,
            delta,
        } => {
            let budget = PrivacyBudget::parse(&epsilon, &delta).map_err(|e| e.to_string())?;
            vec![json(
                &store
                    .add_user_with_budget(&user, &dataset, budget)
                    .map_err(|e| e.to_string())?,
            )]
        }
        Command::AddDataset {
            dataset,
            locator,
            metadata_path,
        } => {
            let doc =
                std::fs::read_to_string(&metadata_path).map_err(|e| format!("{}: {e}", metadata_path.display()))?;
            vec![json(
                &store.add_dataset(&dataset, locator, &doc).map_err(|e| e.to_string())?,
            )]
        }
        Command::ShowCollection { name } => store.show_collection(&name).map_err(|e| e.to_string())?,
        Command::DropUser { user } => vec![json(&store.drop_user(&user).map_err(|e| e.to_string())?)],
    };
    Ok(out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;

use pulsectl::eventbus::{start_broker, DEFAULT_PORT as BUS_PORT};
use pulsectl_gateway::{serve, GatewayConfig, DEFAULT_PORT, HEARTBEAT};

#[derive(Parser)]
#[command(name = "pulsectl-gateway", about = "HTTP/WebSocket gateway to the shot sequencer")]
struct Cli {
    #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
    bind: String,
    /// Store root directory.
    #[arg(long, default_value = "store")]
    store: PathBuf,
    #[arg(long, default_value_t = format!("127.0.0.1:{BUS_PORT}"))]
    broker: String,
    /// Also run the event broker in this process, bound to --broker.
    #[arg(long)]
    embedded_broker: bool,
    /// Token required in X-Auth-Token on mutating requests.
    #[arg(long, env = "PULSECTL_TOKEN", hide_env_values = true)]
    token: String,
    /// Simulation speed as a multiple of real time; 0 runs unpaced.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if !(cli.speed >= 0.0 && cli.speed.is_finite()) {
        eprintln!("pulsectl-gateway: --speed must be a finite number >= 0");
        return ExitCode::from(1);
    }
    let _broker = if cli.embedded_broker {
        match start_broker(cli.broker.as_str()) {
            Ok(b) => Some(b),
            Err(e) => {
                eprintln!("pulsectl-gateway: {e}");
                return ExitCode::from(1);
            }
        }
    } else {
        None
    };
    let config = GatewayConfig {
        bind: cli.bind,
        token: cli.token,
        store: cli.store,
        broker: cli.broker,
        speed: (cli.speed > 0.0).then_some(cli.speed),
        heartbeat: HEARTBEAT,
    };
    let gw = match serve(config).await {
        Ok(gw) => gw,
        Err(e) => {
            eprintln!("pulsectl-gateway: {e}");
            return ExitCode::from(1);
        }
    };
    println!("listening on http://{}", gw.local_addr());
    let _ = tokio::signal::ctrl_c().await;
    log::info!("shutting down");
    tokio::time::timeout(Duration::from_secs(5), gw.shutdown()).await.ok();
    ExitCode::SUCCESS
}

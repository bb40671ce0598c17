use clap::Parser;
use datapop::net::{self, ServerSettings};
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let settings = ServerSettings::with_env_file(ServerSettings::parse())?;
    let server = settings.build_server()?;
    let running = net::spawn(server, settings.net_config()).await?;
    tracing::info!(tcp = %running.tcp_addr, ws = ?running.ws_addr, "listening");
    tokio::signal::ctrl_c().await?;
    running.shutdown().await;
    Ok(())
}

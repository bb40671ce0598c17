//! Starts the network server on free local ports and talks to it once over
//! TCP (newline-delimited JSON) and once over WebSocket.

use std::time::Duration;

use datapop::net::{self, NetConfig};
use datapop::profiles::ProfileStore;
use datapop::protocol::ServerOptions;
use datapop::protocol::Server;
use datapop::session::{GameHub, SessionConfig, World};
use datapop::sim::{generate_people_fixture, FixtureSpec};
use futures_util::{SinkExt, StreamExt};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kb = generate_people_fixture(&FixtureSpec { rows: 8, ..FixtureSpec::default() }, 1).kb;
    let hub = GameHub::new(World::new(kb, ProfileStore::new()), SessionConfig::default(), 0);
    let server = Server::new(hub, None, ServerOptions::default());
    let running = net::spawn(
        server,
        NetConfig {
            tcp_addr: "127.0.0.1:0".parse()?,
            ws_addr: Some("127.0.0.1:0".parse()?),
            tick_interval: Duration::from_millis(50),
            kb_path: None,
            profiles_path: None,
        },
    )
    .await?;
    println!("tcp {} ws {:?}", running.tcp_addr, running.ws_addr);

    let mut tcp = BufReader::new(TcpStream::connect(running.tcp_addr).await?);
    tcp.get_mut().write_all(b"{\"type\":\"hello\",\"user_id\":\"ana\"}\n").await?;
    let mut line = String::new();
    tcp.read_line(&mut line).await?;
    println!("tcp <- {}", line.trim_end());

    let url = format!("ws://{}", running.ws_addr.unwrap());
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await?;
    ws.send(Message::Text(r#"{"type":"hello","user_id":"ben"}"#.into())).await?;
    if let Some(msg) = ws.next().await {
        println!("ws  <- {}", msg?.into_text()?);
    }

    let server = running.shutdown().await;
    println!("known users: {}", server.hub().profiles().len());
    Ok(())
}

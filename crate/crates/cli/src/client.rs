use anyhow::{bail, Result};
use reqwest::{Client, Method, StatusCode};
use serde_json::{json, Value};

use crate::commands::Out;
use crate::{RegistryCommand, Status, UsageError};

fn base(admin: &str) -> String {
    let admin = admin.trim_end_matches('/');
    if admin.contains("://") {
        admin.to_string()
    } else {
        format!("http://{admin}")
    }
}

async fn send(method: Method, url: String, body: Option<Value>) -> Result<(StatusCode, Value)> {
    let mut req = Client::new().request(method, &url);
    if let Some(b) = body {
        req = req.json(&b);
    }
    let resp = req.send().await.map_err(|e| UsageError(format!("{url}: {e}")))?;
    let status = resp.status();
    let text = resp.text().await?;
    let value = if text.is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&text).unwrap_or(Value::String(text))
    };
    Ok((status, value))
}

pub fn run(out: &Out, command: RegistryCommand) -> Result<Status> {
    let (method, url, body) = match &command {
        RegistryCommand::Register {
            admin,
            service,
            instance,
            address,
        } => (
            Method::POST,
            format!("{}/registry/{service}/instances", base(admin)),
            Some(json!({ "instance_id": instance, "address": address })),
        ),
        RegistryCommand::Deregister { admin, service, instance } => (
            Method::DELETE,
            format!("{}/registry/{service}/instances/{instance}", base(admin)),
            None,
        ),
        RegistryCommand::Heartbeat { admin, service, instance } => (
            Method::PUT,
            format!("{}/registry/{service}/instances/{instance}/heartbeat", base(admin)),
            None,
        ),
        RegistryCommand::List { admin, service } => (Method::GET, format!("{}/registry/{service}", base(admin)), None),
    };
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let (status, value) = rt.block_on(send(method, url, body))?;
    if !status.is_success() {
        let msg = value.get("error").and_then(Value::as_str).map(str::to_string);
        bail!("{status}: {}", msg.unwrap_or_else(|| value.to_string()));
    }
    out.emit(&value, || match &command {
        RegistryCommand::List { .. } => value
            .as_array()
            .map(|list| {
                list.iter()
                    .map(|r| {
                        format!(
                            "{} {} {} last={}\n",
                            r["instance_id"].as_str().unwrap_or("?"),
                            r["address"].as_str().unwrap_or("?"),
                            r["status"].as_str().unwrap_or("?"),
                            r["last_heartbeat"]
                        )
                    })
                    .collect()
            })
            .unwrap_or_default(),
        _ => "ok".into(),
    });
    Ok(Status::Clean)
}

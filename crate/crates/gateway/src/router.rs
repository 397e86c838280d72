use std::sync::Arc;
use std::time::Duration;

use tracecloud_bus::Subscription;
use tracecloud_core::{ChannelMessage, Frame, ResponseStatus, Topics};

use crate::metrics::Metrics;
use crate::registry::RouteError;
use crate::{now_ms, Shared};

/// Forwards commands from `trace.requests` to tracer connections. Commands
/// for tracers that are not connected are answered with a rejection on the
/// tracer's behalf.
pub(crate) async fn run(shared: Arc<Shared>, sub: Subscription) {
    loop {
        let records = match sub.poll(256, Duration::from_secs(1)).await {
            Ok(r) => r,
            Err(e) => {
                tracing::error!(error = %e, "request poll failed");
                tokio::time::sleep(Duration::from_millis(200)).await;
                continue;
            }
        };
        for rec in records {
            route_one(&shared, &rec.value);
            if let Err(e) = sub.commit(rec.partition, rec.offset + 1) {
                tracing::error!(error = %e, offset = rec.offset, "request commit failed");
            }
        }
    }
}

fn route_one(shared: &Shared, value: &[u8]) {
    let msg = match ChannelMessage::decode(value) {
        Ok(m) => m,
        Err(e) => {
            tracing::warn!(error = %e, "skipping undecodable request record");
            return;
        }
    };
    let request_id = match msg.frame {
        Frame::StartTrace { request_id, .. } | Frame::StopTrace { request_id, .. } => request_id,
        ref other => {
            tracing::warn!(msg_type = other.msg_type(), "skipping non-command request record");
            return;
        }
    };
    match shared.registry.route(&msg.tracer_id, msg.frame.clone()) {
        Ok(()) => {
            Metrics::add(&shared.metrics.requests_routed, 1);
            tracing::debug!(tracer_id = msg.tracer_id, request_id, "request routed");
        }
        Err(RouteError::UnknownTracer | RouteError::NotACommand) => {
            Metrics::add(&shared.metrics.requests_rejected, 1);
            tracing::warn!(tracer_id = msg.tracer_id, request_id, reason = "unknown_tracer", "request rejected");
            let reply = ChannelMessage::new(
                &msg.tracer_id,
                now_ms(),
                Frame::Response { request_id, status: ResponseStatus::Rejected },
            );
            let published = reply.encode().map_err(|e| e.to_string()).and_then(|v| {
                shared.broker.publish(Topics::RESPONSES, msg.tracer_id.as_bytes(), &v).map_err(|e| e.to_string())
            });
            match published {
                Ok(_) => Metrics::add(&shared.metrics.responses_published, 1),
                Err(e) => tracing::error!(error = %e, "failed to publish rejection"),
            }
        }
    }
}

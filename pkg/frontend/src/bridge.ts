/**
 * TCP-to-WebSocket relay.  Browsers cannot open raw sockets, so this node
 * process speaks the length-prefixed wire protocol to the simulation server
 * and forwards each payload verbatim as one WebSocket text message (and the
 * reverse for actions).  It also serves the static client.
 */

import { createServer } from "node:http";
import net from "node:net";
import path from "node:path";
import { fileURLToPath, pathToFileURL } from "node:url";
import { parseArgs } from "node:util";

import express from "express";
import { WebSocketServer } from "ws";

import { StreamDecoder, frameText } from "./protocol.js";

export interface BridgeOptions {
  simHost: string;
  simPort: number;
  httpPort: number;
  serveStatic?: boolean;
  quiet?: boolean;
}

export interface Bridge {
  port: number;
  close(): Promise<void>;
}

export async function startBridge(opts: BridgeOptions): Promise<Bridge> {
  const app = express();
  if (opts.serveStatic !== false) {
    const here = path.dirname(fileURLToPath(import.meta.url));
    const root = path.dirname(here);
    app.use(express.static(path.join(root, "public")));
    app.use("/dist", express.static(path.join(root, "dist")));
  }
  const server = createServer(app);
  const wss = new WebSocketServer({ server, path: "/ws" });

  wss.on("connection", (ws) => {
    const tcp = net.createConnection({ host: opts.simHost, port: opts.simPort });
    tcp.setNoDelay(true);
    const decoder = new StreamDecoder();

    tcp.on("data", (chunk: Buffer) => {
      try {
        for (const payload of decoder.push(new Uint8Array(chunk))) {
          ws.send(payload);
        }
      } catch {
        ws.close(1002, "corrupt stream from simulation");
        tcp.destroy();
      }
    });
    tcp.on("close", () => ws.close(1000, "simulation closed"));
    tcp.on("error", () => ws.close(1011, "simulation unreachable"));

    ws.on("message", (data) => {
      tcp.write(frameText(data.toString()));
    });
    ws.on("close", () => tcp.destroy());
    ws.on("error", () => tcp.destroy());
  });

  await new Promise<void>((resolve) => server.listen(opts.httpPort, resolve));
  const addr = server.address();
  const port = typeof addr === "object" && addr ? addr.port : opts.httpPort;
  if (!opts.quiet) {
    console.log(`teleop ui at http://localhost:${port} `
      + `(sim ${opts.simHost}:${opts.simPort})`);
  }
  return {
    port,
    close: () =>
      new Promise<void>((resolve) => {
        for (const client of wss.clients) client.terminate();
        wss.close(() => server.close(() => resolve()));
      }),
  };
}

function main(): void {
  const { values } = parseArgs({
    options: {
      sim: { type: "string", default: "127.0.0.1:7777" },
      port: { type: "string", default: "8080" },
    },
  });
  const [host, simPort] = (values.sim as string).split(":");
  startBridge({
    simHost: host || "127.0.0.1",
    simPort: Number(simPort ?? 7777),
    httpPort: Number(values.port),
  });
}

if (process.argv[1]
    && import.meta.url === pathToFileURL(process.argv[1]).href) {
  main();
}

/**
 * Connection-serving state machine, transport-agnostic: feed it bytes, it
 * writes frames back. One hello establishes the schedule, then requests map
 * through the active predictor; malformed frames and predictor failures come
 * back as error frames without dropping the connection.
 */

import {
  FrameParser,
  KIND_HELLO,
  KIND_REQUEST,
  PROTOCOL_VERSION,
  ProtocolError,
  WireMessage,
  decodePayload,
  encodeMessage,
  errorMessage,
  helloMessage,
  responseMessage,
} from "./protocol.js";
import { HelloInfo, PredictRequest, Predictor } from "./predictors.js";

export type PredictorFactory = (hello: HelloInfo) => Predictor | Promise<Predictor>;

export interface ServerIO {
  write(data: Buffer): void;
  close(): void;
}

export class BackendSession {
  private parser = new FrameParser();
  private predictor: Predictor | null = null;

  constructor(
    private io: ServerIO,
    private factory: PredictorFactory,
  ) {}

  private reply(msg: WireMessage): void {
    this.io.write(encodeMessage(msg));
  }

  async feed(chunk: Buffer): Promise<void> {
    for (const frame of this.parser.push(chunk)) {
      if ("error" in frame) {
        this.reply(errorMessage(frame.error));
        continue;
      }
      let msg: WireMessage;
      try {
        msg = decodePayload(frame.kind, Buffer.from(frame.payload));
      } catch (e) {
        const reason = e instanceof ProtocolError ? e.message : `decode failed: ${e}`;
        this.reply(errorMessage(reason));
        continue;
      }
      await this.dispatch(msg);
    }
  }

  private async dispatch(msg: WireMessage): Promise<void> {
    if (msg.kind === KIND_HELLO) {
      const version = msg.header.version;
      if (version !== PROTOCOL_VERSION) {
        this.reply(errorMessage(`unsupported protocol version ${JSON.stringify(version)}`));
        this.io.close();
        return;
      }
      const alphaBar = msg.header.alpha_bar ?? [];
      const hello: HelloInfo = {
        alphaBar,
        numSteps: msg.header.num_steps ?? Math.max(alphaBar.length - 1, 0),
      };
      try {
        this.predictor = await this.factory(hello);
      } catch (e) {
        this.reply(errorMessage(`backend setup failed: ${(e as Error).message}`));
        this.io.close();
        return;
      }
      this.reply(helloMessage());
    } else if (msg.kind === KIND_REQUEST) {
      if (!this.predictor) {
        this.reply(errorMessage("request before hello"));
        return;
      }
      const latent = msg.tensors.get("latent");
      const spec = (msg.header.tensors ?? []).find((t) => t.name === "latent");
      if (!latent || !spec) {
        this.reply(errorMessage("request carries no latent tensor"));
        return;
      }
      const conditions = new Map<string, Float32Array>();
      for (const [name, arr] of msg.tensors) {
        if (name !== "latent") conditions.set(name, arr);
      }
      const req: PredictRequest = {
        latent,
        dims: spec.dims,
        timestep: msg.header.timestep ?? 0,
        conditions,
        prompt: msg.header.prompt ?? null,
      };
      let eps: Float32Array;
      try {
        eps = this.predictor(req);
      } catch (e) {
        this.reply(errorMessage(`predictor failed: ${(e as Error).message}`));
        return;
      }
      this.reply(responseMessage(eps, spec.dims));
    } else {
      this.reply(errorMessage(`unexpected message kind ${msg.kind}`));
    }
  }
}

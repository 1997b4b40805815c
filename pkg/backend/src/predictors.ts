/**
 * Noise predictors the backend can serve.
 *
 * The oracle reproduces the engine's closed-form noise for a fixed clean
 * target bit for bit: the engine computes in float64 and rounds the result
 * once to float32, which is exactly what plain double arithmetic stored into
 * a Float32Array does here.
 */

export interface PredictRequest {
  latent: Float32Array;
  dims: number[];
  timestep: number;
  conditions: Map<string, Float32Array>;
  prompt: string | null;
}

export type Predictor = (req: PredictRequest) => Float32Array;

export interface HelloInfo {
  alphaBar: number[];
  numSteps: number;
}

export function makeOracle(
  target: Float32Array,
  targetDims: number[],
  hello: HelloInfo,
): Predictor {
  return (req) => {
    if (req.dims.join(",") !== targetDims.join(",")) {
      throw new Error(
        `oracle target dims [${targetDims}] do not match request latent [${req.dims}]`,
      );
    }
    const t = req.timestep;
    if (t < 1 || t >= hello.alphaBar.length) {
      throw new Error(`timestep ${t} outside schedule range`);
    }
    const ab = hello.alphaBar[t];
    if (ab >= 1.0) throw new Error(`alpha_bar[${t}] = 1 divides by zero`);
    const sqrtAb = Math.sqrt(ab);
    const sqrtOneMinus = Math.sqrt(1.0 - ab);
    const eps = new Float32Array(req.latent.length);
    for (let i = 0; i < eps.length; i++) {
      eps[i] = (req.latent[i] - sqrtAb * target[i]) / sqrtOneMinus;
    }
    return eps;
  };
}

export function makeEchoZeros(): Predictor {
  return (req) => new Float32Array(req.latent.length);
}

/**
 * External hook: the insertion point for a real diffusion model. The module
 * must export `predict(latent, dims, timestep, conditions, prompt, hello)`
 * returning a Float32Array of the latent's size; no model code ships here.
 */
export async function loadExternalHook(modulePath: string, hello: HelloInfo): Promise<Predictor> {
  const mod = await import(modulePath);
  if (typeof mod.predict !== "function") {
    throw new Error(`external hook ${modulePath} does not export predict()`);
  }
  return (req) =>
    mod.predict(req.latent, req.dims, req.timestep, req.conditions, req.prompt, hello);
}

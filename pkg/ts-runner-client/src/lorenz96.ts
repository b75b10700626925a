/**
 * Lorenz-96 propagation, bit-identical to the server-side reference.
 *
 * The evaluation order of every floating-point expression is part of the
 * cross-implementation contract: a state propagated here and by the
 * reference implementation must produce the same 64-bit doubles, so a
 * mixed-language runner fleet yields byte-identical studies. Keep the
 * expression shapes exactly as written.
 */

function tendency(x: Float64Array, forcing: number, out: Float64Array): void {
  const n = x.length;
  for (let j = 0; j < n; j++) {
    const jp1 = (j + 1) % n;
    const jm1 = (j + n - 1) % n;
    const jm2 = (j + n - 2) % n;
    out[j] = (x[jp1] - x[jm2]) * x[jm1] - x[j] + forcing;
  }
}

/** One RK4 step of dx_j/dt = (x_{j+1} - x_{j-2}) x_{j-1} - x_j + F. */
export function lorenz96Step(x: Float64Array, forcing: number, dt: number): Float64Array {
  const n = x.length;
  const half = 0.5 * dt;
  const sixth = dt / 6.0;
  const k1 = new Float64Array(n);
  const k2 = new Float64Array(n);
  const k3 = new Float64Array(n);
  const k4 = new Float64Array(n);
  const tmp = new Float64Array(n);

  tendency(x, forcing, k1);
  for (let j = 0; j < n; j++) tmp[j] = x[j] + half * k1[j];
  tendency(tmp, forcing, k2);
  for (let j = 0; j < n; j++) tmp[j] = x[j] + half * k2[j];
  tendency(tmp, forcing, k3);
  for (let j = 0; j < n; j++) tmp[j] = x[j] + dt * k3[j];
  tendency(tmp, forcing, k4);

  const out = new Float64Array(n);
  for (let j = 0; j < n; j++) {
    out[j] = x[j] + sixth * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
  }
  return out;
}

export function lorenz96Propagate(
  x: Float64Array,
  nsteps: number,
  forcing: number,
  dt: number,
): Float64Array {
  if (x.length < 4) throw new Error("Lorenz-96 needs at least 4 variables");
  let out: Float64Array = Float64Array.from(x);
  for (let s = 0; s < nsteps; s++) out = lorenz96Step(out, forcing, dt);
  return out;
}

export interface ModelConfig {
  nDynamic: number;
  nAssimilated: number;
  forcing: number;
  dt: number;
}

/**
 * Full dynamic-state propagation: Lorenz-96 core on the assimilated prefix
 * plus the time-integrated diagnostic tail (tail[i] += dt * x[i mod n]
 * after every step, using the updated core).
 */
export function propagateDynamic(
  values: Float64Array,
  nsteps: number,
  model: ModelConfig,
): Float64Array {
  const n = model.nAssimilated;
  let x: Float64Array = values.slice(0, n);
  const tail = values.slice(n);
  for (let s = 0; s < nsteps; s++) {
    x = lorenz96Step(x, model.forcing, model.dt);
    for (let i = 0; i < tail.length; i++) {
      tail[i] = tail[i] + model.dt * x[i % n];
    }
  }
  const out = new Float64Array(values.length);
  out.set(x, 0);
  out.set(tail, n);
  return out;
}

export function allFinite(values: Float64Array): boolean {
  for (let i = 0; i < values.length; i++) {
    if (!Number.isFinite(values[i])) return false;
  }
  return true;
}

/**
 * Score models the server can expose.  All arithmetic runs in float64 on the
 * float32 wire values, mirroring the in-process analytic priors, so round
 * trips agree bitwise at float32 precision.
 */

export interface ModelMeta {
  data_rms: number | null;
  sample_rate: number;
  max_len: number;
  supports_vjp: boolean;
}

export interface ScoreModel {
  meta(): ModelMeta;
  /** Gradient of the log marginal density at noise level sigma. */
  score(x: Float64Array, sigma: number): Float64Array;
  /** Cotangent through the score Jacobian; absent when unsupported. */
  vjpScore?(x: Float64Array, sigma: number, cotangent: Float64Array): Float64Array;
}

export interface GaussianOptions {
  mean?: number;
  variance?: number;
  dataRms?: number | null;
  sampleRate?: number;
  maxLen?: number;
  supportsVjp?: boolean;
}

/** Isotropic Gaussian prior N(mean, variance I) with a closed-form score. */
export class GaussianScoreModel implements ScoreModel {
  readonly mean: number;
  readonly variance: number;
  private readonly metaRecord: ModelMeta;

  constructor(options: GaussianOptions = {}) {
    this.mean = options.mean ?? 0.0;
    this.variance = options.variance ?? 1.0;
    if (!(this.variance > 0)) {
      throw new Error("variance must be positive");
    }
    const supportsVjp = options.supportsVjp ?? true;
    this.metaRecord = {
      data_rms: options.dataRms === undefined ? 0.05 : options.dataRms,
      sample_rate: options.sampleRate ?? 16000,
      max_len: options.maxLen ?? 1_000_000,
      supports_vjp: supportsVjp,
    };
    if (!supportsVjp) {
      this.vjpScore = undefined;
    }
  }

  meta(): ModelMeta {
    return this.metaRecord;
  }

  score(x: Float64Array, sigma: number): Float64Array {
    const denom = this.variance + sigma * sigma;
    const out = new Float64Array(x.length);
    for (let i = 0; i < x.length; i++) {
      out[i] = (this.mean - x[i]) / denom;
    }
    return out;
  }

  vjpScore?(x: Float64Array, sigma: number, cotangent: Float64Array): Float64Array {
    const denom = this.variance + sigma * sigma;
    const out = new Float64Array(cotangent.length);
    for (let i = 0; i < cotangent.length; i++) {
      out[i] = -cotangent[i] / denom;
    }
    return out;
  }
}

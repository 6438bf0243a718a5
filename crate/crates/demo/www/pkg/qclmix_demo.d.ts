/* tslint:disable */
/* eslint-disable */

/**
 * Step-by-step training on a generated moons set, for the boundary view.
 */
export class ToyRun {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Probability of class 1 over a `res x res` grid in raw coordinates,
     * rows top to bottom.
     */
    boundary(res: number, extent: number): Float64Array;
    finished(): boolean;
    /**
     * `variant` is one of `full`, `no-quantum`, `no-mixup`, `no-attention`.
     */
    constructor(n: number, minority: number, noise: number, variant: string, epochs: number, seed: number);
    /**
     * Raw points as `[x, y, label]` triples.
     */
    points(): Float64Array;
    /**
     * One epoch; returns `[epoch, loss, accuracy, maF1]` on the training set.
     */
    step(): Float64Array;
}

/**
 * kNN-guided mixup of one batch of 2-D points. Per point:
 * `[partner, lambda, mixed_x, mixed_y]`.
 */
export function mixup(xy: Float64Array, labels: Uint32Array, k: number, alpha: number, seed: number): Float64Array;

/**
 * QE layer over a `res x res` grid spanning `[-extent, extent]^2`, rows top
 * to bottom. Per cell: `[out_x, out_y, gate]`.
 */
export function qe_field(theta0: number, theta1: number, extent: number, res: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_toyrun_free: (a: number, b: number) => void;
    readonly mixup: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly qe_field: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly toyrun_boundary: (a: number, b: number, c: number) => [number, number, number, number];
    readonly toyrun_finished: (a: number) => number;
    readonly toyrun_new: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
    readonly toyrun_points: (a: number) => [number, number];
    readonly toyrun_step: (a: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;

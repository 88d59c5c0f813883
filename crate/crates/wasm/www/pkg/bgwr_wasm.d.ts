/* tslint:disable */
/* eslint-disable */

export class Lattice {
    free(): void;
    [Symbol.dispose](): void;
    elpdCurve(candidates: Float64Array): Float64Array;
    fitMeans(bandwidth: number, j: number): Float64Array;
    nSites(): number;
    constructor(width: number, height: number, m: number, seed: bigint, iterations: number);
    truth(j: number): Float64Array;
}

export function coefficientGrid(width: number, height: number, j: number): Float64Array;

export function kernelGrid(width: number, height: number, cu: number, cv: number, bandwidth: number, threshold: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_lattice_free: (a: number, b: number) => void;
    readonly coefficientGrid: (a: number, b: number, c: number) => [number, number, number, number];
    readonly kernelGrid: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly lattice_elpdCurve: (a: number, b: number, c: number) => [number, number, number, number];
    readonly lattice_fitMeans: (a: number, b: number, c: number) => [number, number, number, number];
    readonly lattice_nSites: (a: number) => number;
    readonly lattice_new: (a: number, b: number, c: number, d: bigint, e: number) => [number, number, number];
    readonly lattice_truth: (a: number, b: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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

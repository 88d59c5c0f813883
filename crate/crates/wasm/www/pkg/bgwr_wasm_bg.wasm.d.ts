/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_lattice_free: (a: number, b: number) => void;
export const coefficientGrid: (a: number, b: number, c: number) => [number, number, number, number];
export const kernelGrid: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const lattice_elpdCurve: (a: number, b: number, c: number) => [number, number, number, number];
export const lattice_fitMeans: (a: number, b: number, c: number) => [number, number, number, number];
export const lattice_nSites: (a: number) => number;
export const lattice_new: (a: number, b: number, c: number, d: bigint, e: number) => [number, number, number];
export const lattice_truth: (a: number, b: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;

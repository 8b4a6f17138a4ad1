/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_attacklab_free: (a: number, b: number) => void;
export const attacklab_attack: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const attacklab_clean_accuracy: (a: number) => number;
export const attacklab_new: (a: number) => [number, number, number];
export const attacklab_samples: (a: number) => number;
export const attacklab_side: (a: number) => number;
export const complexity_table: (a: number, b: number, c: number) => [number, number, number, number];
export const deepfool_path: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;

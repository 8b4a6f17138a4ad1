/* tslint:disable */
/* eslint-disable */

/**
 * A small CNN trained in the page on synthetic 4-class glyphs.
 */
export class AttackLab {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * JSON `AttackView` for sample `index` under `kind`
     * (`fgsm`, `bim`, `mim`, `deepfool`, `cw`).
     */
    attack(index: number, kind: string, epsilon: number, iterations: number): string;
    constructor(seed: number);
    readonly clean_accuracy: number;
    readonly samples: number;
    readonly side: number;
}

/**
 * JSON list of `ComplexityRow`s for `fmnist` or `cifar` with `removed`
 * convolutions cut from the CBC.
 */
export function complexity_table(dataset: string, removed: number): string;

/**
 * JSON `DeepFoolPath` for a three-class linear classifier on the unit square.
 */
export function deepfool_path(x: number, y: number, overshoot: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_attacklab_free: (a: number, b: number) => void;
    readonly attacklab_attack: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly attacklab_clean_accuracy: (a: number) => number;
    readonly attacklab_new: (a: number) => [number, number, number];
    readonly attacklab_samples: (a: number) => number;
    readonly attacklab_side: (a: number) => number;
    readonly complexity_table: (a: number, b: number, c: number) => [number, number, number, number];
    readonly deepfool_path: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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

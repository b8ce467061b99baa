/* tslint:disable */
/* eslint-disable */

export function fundus(glaucoma: boolean, seed: number, size: number, equalize: boolean, augment_seed: number): Uint8Array;

/**
 * Margin loss of the two class-capsule lengths for the given label.
 */
export function margin_loss(normal: number, glaucoma: number, label: number): number;

export function roc(scores: string, labels: string, threshold: number): Float64Array;

export function routing(n: number, iters: number, agree: number, seed: number): Float64Array;

/**
 * Output length `‖squash(s)‖` for an input of length `s`.
 */
export function squash_length(s: number): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly fundus: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly margin_loss: (a: number, b: number, c: number) => number;
    readonly roc: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly routing: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly squash_length: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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

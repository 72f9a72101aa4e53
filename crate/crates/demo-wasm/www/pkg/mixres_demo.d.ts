/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Runs the encoder on the current scene. `source` picks what drives the
     * splits: `model` (predicted scores), `oracle` (ground-truth boundary
     * fractions) or `dense` (everything).
     */
    allocate(tau1: number, tau2: number, tau3: number, source: string): string;
    /**
     * The scene dimmed, with boundary pixels of the given connectivity (4
     * or 8) in white.
     */
    boundary_rgba(connectivity: number): Uint8Array;
    /**
     * The scene tinted by the level of each pixel's finest token.
     */
    cover_rgba(): Uint8Array;
    /**
     * Synthesizes the scene for `seed` and returns its description.
     */
    generate(seed: number): string;
    height(): number;
    /**
     * Replaces the model with trained parameters. `run_json` is the run
     * configuration they were trained with; empty means the desk setup.
     */
    load_params(bytes: Uint8Array, run_json: string): string;
    /**
     * White where round `round` (1-based) split a token.
     */
    mask_rgba(round: number): Uint8Array;
    /**
     * Desk setup with a freshly initialized model.
     */
    constructor(seed: number);
    /**
     * Sanity-head class per finest cell, in class colors.
     */
    prediction_rgba(): Uint8Array;
    scene_rgba(): Uint8Array;
    width(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_allocate: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly demo_boundary_rgba: (a: number, b: number) => [number, number, number, number];
    readonly demo_cover_rgba: (a: number) => [number, number, number, number];
    readonly demo_generate: (a: number, b: number) => [number, number, number, number];
    readonly demo_height: (a: number) => number;
    readonly demo_load_params: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_mask_rgba: (a: number, b: number) => [number, number, number, number];
    readonly demo_new: (a: number) => [number, number, number];
    readonly demo_prediction_rgba: (a: number) => [number, number, number, number];
    readonly demo_scene_rgba: (a: number) => [number, number];
    readonly demo_width: (a: number) => number;
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

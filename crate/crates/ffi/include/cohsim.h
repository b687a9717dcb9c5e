#ifndef COHSIM_H
#define COHSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define COHSIM_ABI_VERSION 1

typedef enum CohsimStatus {
  COHSIM_STATUS_OK = 0,
  COHSIM_STATUS_NULL_POINTER = 1,
  COHSIM_STATUS_INVALID_ARGUMENT = 2,
  COHSIM_STATUS_CONFIG = 3,
  COHSIM_STATUS_PARSE = 4,
  COHSIM_STATUS_ADDRESS_OUT_OF_RANGE = 5,
  COHSIM_STATUS_DEADLOCK = 6,
  COHSIM_STATUS_PANIC = 7,
} CohsimStatus;

/**
 * Opaque parsed probe program.
 */
typedef struct CohsimProgram CohsimProgram;

/**
 * Opaque simulation instance.
 */
typedef struct CohsimSystem CohsimSystem;

typedef struct CohsimAccess {
  /**
   * 0 = L1, 1 = L2, 2 = LLC, 3 = memory.
   */
  uint32_t hit_level;
  /**
   * Non-zero if the response was REMOTE_EM.
   */
  uint32_t remote_em;
  uint64_t latency;
  uint64_t torc_delay;
} CohsimAccess;

typedef struct CohsimExecution {
  /**
   * Last minus first timer read, if the program read the timer twice.
   */
  uint64_t delta;
  uint32_t has_delta;
  uint32_t redo_count;
  uint32_t remote_em_count;
  uint32_t squashed;
  uint64_t start_cycle;
  uint64_t end_cycle;
} CohsimExecution;

typedef struct CohsimLrbsResult {
  uint64_t median_cycles;
  uint32_t runs;
  uint32_t redo_count;
  uint32_t remote_em_count;
} CohsimLrbsResult;

typedef struct CohsimPropertyResult {
  uint32_t pass;
  uint32_t constant;
  /**
   * Receiver total of the empty transmitter subset.
   */
  uint64_t total;
  /**
   * Analytic total, 0 when the configuration has none.
   */
  uint64_t expected_total;
  uint64_t overhead;
  uint32_t subsets;
} CohsimPropertyResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * ABI version of this library; bumped on incompatible changes.
 */
uint32_t cohsim_abi_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *cohsim_last_error_message(void);

/**
 * Create a system with default hierarchy and timing. `config` is 1..5,
 * `spdm` is 0 (branch shadow) or 1 (ROB head).
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one pointer.
 */
enum CohsimStatus cohsim_system_new(uint32_t config, uint32_t spdm, struct CohsimSystem **out);

/**
 * # Safety
 * `sys` must be null or a pointer from `cohsim_system_new` not yet freed.
 */
void cohsim_system_free(struct CohsimSystem *sys);

/**
 * Current value of the system clock.
 *
 * # Safety
 * `sys` must be null or a live system handle.
 */
uint64_t cohsim_system_now(const struct CohsimSystem *sys);

/**
 * Non-speculative load of `address` by `core`; advances the clock.
 *
 * # Safety
 * `sys` must be a live system handle; `out` null or writable.
 */
enum CohsimStatus cohsim_system_load(struct CohsimSystem *sys,
                                     uint32_t core,
                                     uint64_t address,
                                     struct CohsimAccess *out);

/**
 * Store to `address` by `core`; writes the latency to `latency` if non-null.
 *
 * # Safety
 * `sys` must be a live system handle; `latency` null or writable.
 */
enum CohsimStatus cohsim_system_store(struct CohsimSystem *sys,
                                      uint32_t core,
                                      uint64_t address,
                                      uint64_t *latency);

/**
 * # Safety
 * `sys` must be a live system handle.
 */
enum CohsimStatus cohsim_system_flush(struct CohsimSystem *sys, uint32_t core, uint64_t address);

/**
 * Parse a program in the text assembly form.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` writable.
 */
enum CohsimStatus cohsim_program_parse(const char *text, struct CohsimProgram **out);

/**
 * # Safety
 * `prog` must be null or a pointer from `cohsim_program_parse` not yet freed.
 */
void cohsim_program_free(struct CohsimProgram *prog);

/**
 * Run `prog` on `core`. `regs` is null or points to `nregs` (at most 16)
 * initial values for r0, r1, ...
 *
 * # Safety
 * Handles must be live; `regs` must point to `nregs` readable values.
 */
enum CohsimStatus cohsim_system_execute(struct CohsimSystem *sys,
                                        uint32_t core,
                                        const struct CohsimProgram *prog,
                                        const uint64_t *regs,
                                        size_t nregs,
                                        struct CohsimExecution *out);

/**
 * Run the probe experiment for one (config, spdm, secret) cell.
 *
 * # Safety
 * `out` must be writable.
 */
enum CohsimStatus cohsim_run_lrbs(uint32_t config,
                                  uint32_t spdm,
                                  uint32_t secret,
                                  uint32_t runs,
                                  struct CohsimLrbsResult *out);

/**
 * Receiver-total constancy over all subsets of an `n`-line set (1..8).
 *
 * # Safety
 * `out` must be writable.
 */
enum CohsimStatus cohsim_check_property(uint32_t config,
                                        uint32_t spdm,
                                        uint32_t n,
                                        struct CohsimPropertyResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COHSIM_H */

#ifndef PICOFW_H
#define PICOFW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FwStatus {
  FW_STATUS_OK = 0,
  FW_STATUS_NULL_ARGUMENT = 1,
  FW_STATUS_INVALID_UTF8 = 2,
  FW_STATUS_PARSE_ERROR = 3,
  FW_STATUS_INTEGRITY_ERROR = 4,
  FW_STATUS_VALIDATION_ERROR = 5,
  FW_STATUS_PACKET_ERROR = 6,
  FW_STATUS_INVALID_ARGUMENT = 7,
  FW_STATUS_PANIC = 8,
} FwStatus;

typedef enum FwOutcome {
  FW_OUTCOME_DELIVERED_LOCAL = 0,
  FW_OUTCOME_FORWARDED = 1,
  FW_OUTCOME_DROPPED = 2,
  FW_OUTCOME_REJECTED = 3,
} FwOutcome;

/**
 * Opaque engine handle. Not safe for concurrent use from several threads.
 */
typedef struct FwEngine FwEngine;

/**
 * Opaque ruleset handle.
 */
typedef struct FwRuleset FwRuleset;

typedef struct FwVerdict {
  enum FwOutcome outcome;
  uint64_t rules_traversed;
  /**
   * Number of events (LOG, REJECT notification, NAT) emitted.
   */
  uint32_t event_count;
} FwVerdict;

typedef struct FwEnergy {
  double watts;
  double tariff_per_kwh;
  double daily_kwh;
  double daily_cost;
  double annual_cost;
} FwEnergy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *fw_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void fw_string_free(char *s);

/**
 * An empty ruleset: five built-in chains, all ACCEPT, version 0.
 */
struct FwRuleset *fw_ruleset_new(void);

/**
 * Parses and validates an image.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum FwStatus fw_ruleset_parse(const char *text, struct FwRuleset **out);

/**
 * Canonical image text, checksum line included.
 *
 * # Safety
 * `rs` must be a live handle; `out` must be writable.
 */
enum FwStatus fw_ruleset_serialize(const struct FwRuleset *rs, char **out);

/**
 * Appends a `-A CHAIN ...` line. On failure the ruleset is unchanged.
 *
 * # Safety
 * `rs` must be a live handle; `line` a NUL-terminated string.
 */
enum FwStatus fw_ruleset_append(struct FwRuleset *rs, const char *line);

/**
 * # Safety
 * `rs` must be a live handle or null (returns 0).
 */
uint64_t fw_ruleset_version(const struct FwRuleset *rs);

/**
 * # Safety
 * `rs` must be a live handle or null (returns 0).
 */
size_t fw_ruleset_rule_count(const struct FwRuleset *rs);

/**
 * # Safety
 * `rs` must come from this library and not have been freed. Null is ignored.
 */
void fw_ruleset_free(struct FwRuleset *rs);

/**
 * Creates an engine running a copy of `rs`.
 *
 * # Safety
 * `rs` must be a live handle; `out` must be writable.
 */
enum FwStatus fw_engine_new(const struct FwRuleset *rs, struct FwEngine **out);

/**
 * Installs a copy of `rs`; connections survive, counters restart.
 *
 * # Safety
 * Both handles must be live.
 */
enum FwStatus fw_engine_swap(struct FwEngine *engine, const struct FwRuleset *rs);

/**
 * Processes one packet given as a literal such as
 * `tcp 10.0.0.1:1234 > 10.0.0.2:80 syn fwd`.
 *
 * # Safety
 * `engine` must be live; `packet` NUL-terminated; `out` writable.
 */
enum FwStatus fw_engine_eval(struct FwEngine *engine, const char *packet, struct FwVerdict *out);

/**
 * Counter snapshot as JSON.
 *
 * # Safety
 * `engine` must be live; `out` writable.
 */
enum FwStatus fw_engine_stats_json(const struct FwEngine *engine, char **out);

/**
 * # Safety
 * `engine` must come from this library and not have been freed. Null is ignored.
 */
void fw_engine_free(struct FwEngine *engine);

/**
 * Modelled throughput in Mbps of a named platform (`rpi`, `cubieboard`)
 * at `n_rules`. Returns a negative value for an unknown platform.
 *
 * # Safety
 * `platform` must be a NUL-terminated string.
 */
double fw_model_throughput(const char *platform, uint64_t n_rules);

/**
 * Running cost at constant `watts` and a price per kWh.
 *
 * # Safety
 * `out` must be writable.
 */
enum FwStatus fw_energy(double watts, double tariff_per_kwh, struct FwEnergy *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PICOFW_H */

#pragma once

#include <stdexcept>
#include <string>

namespace perfscreen {

/// Root of every error the library raises. `code()` is a stable machine token
/// used by the CLI and the HTTP layer.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}
  [[nodiscard]] const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define PERFSCREEN_DEFINE_ERROR(Name, token)                                  \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& message) : Error(token, message) {}     \
  };

PERFSCREEN_DEFINE_ERROR(MarkUnparseable, "mark_unparseable")
PERFSCREEN_DEFINE_ERROR(DateUnparseable, "date_unparseable")
PERFSCREEN_DEFINE_ERROR(WindUnparseable, "wind_unparseable")
PERFSCREEN_DEFINE_ERROR(InvalidRow, "invalid_row")
PERFSCREEN_DEFINE_ERROR(MissingColumns, "missing_columns")
PERFSCREEN_DEFINE_ERROR(StorageError, "storage_error")
PERFSCREEN_DEFINE_ERROR(UnknownMethod, "unknown_method")
PERFSCREEN_DEFINE_ERROR(InvalidConfig, "invalid_config")
PERFSCREEN_DEFINE_ERROR(InvalidSlice, "invalid_slice")
PERFSCREEN_DEFINE_ERROR(PreconditionError, "precondition_failed")
PERFSCREEN_DEFINE_ERROR(DegenerateTarget, "degenerate_target")
PERFSCREEN_DEFINE_ERROR(DegenerateFeature, "degenerate_feature")
PERFSCREEN_DEFINE_ERROR(SamplerDiverged, "sampler_diverged")
PERFSCREEN_DEFINE_ERROR(StaleCursor, "stale_cursor")
PERFSCREEN_DEFINE_ERROR(NotMaterialized, "not_materialized")
PERFSCREEN_DEFINE_ERROR(NotFound, "not_found")
PERFSCREEN_DEFINE_ERROR(Cancelled, "cancelled")

#undef PERFSCREEN_DEFINE_ERROR

}  // namespace perfscreen

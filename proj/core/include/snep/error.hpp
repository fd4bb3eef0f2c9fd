#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace snep {

enum class Errc {
  invalid_natural_domain,
  invalid_mean_domain,
  dimension_mismatch,
  tilted_invalid,
  aux_invalid,
  unsupported_model,
  nonfinite_gradient,
  nonfinite_density,
  bad_magic,
  bad_version,
  bad_type,
  truncated_payload,
  parse_error,
  validation_error,
  diagnostic_failure,
  zero_reference,
  io_error,
};

std::string_view to_string(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace snep

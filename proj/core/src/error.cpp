#include "snep/error.hpp"

namespace snep {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::invalid_natural_domain: return "invalid-natural-domain";
    case Errc::invalid_mean_domain: return "invalid-mean-domain";
    case Errc::dimension_mismatch: return "dimension-mismatch";
    case Errc::tilted_invalid: return "tilted-invalid";
    case Errc::aux_invalid: return "aux-invalid";
    case Errc::unsupported_model: return "unsupported-model";
    case Errc::nonfinite_gradient: return "nonfinite-gradient";
    case Errc::nonfinite_density: return "nonfinite-density";
    case Errc::bad_magic: return "bad-magic";
    case Errc::bad_version: return "bad-version";
    case Errc::bad_type: return "bad-type";
    case Errc::truncated_payload: return "truncated-payload";
    case Errc::parse_error: return "parse-error";
    case Errc::validation_error: return "validation-error";
    case Errc::diagnostic_failure: return "diagnostic-failure";
    case Errc::zero_reference: return "zero-reference";
    case Errc::io_error: return "io-error";
  }
  return "unknown";
}

}  // namespace snep

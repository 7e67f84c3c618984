#pragma once

namespace quantlab {

// quantlab {train|quantize|analyze|finetune|eval|sweep|report} --config path [overrides]
// Exit codes: 0 ok, 1 validation, 2 numerical failure, 3 I/O.
int run_cli(int argc, const char* const* argv);

}  // namespace quantlab

#pragma once

#include <iosfwd>

namespace sketchdiff {

/// Entry point for the `sketchdiff` tool.
///
///   train --config PATH --stage {1,2} [--resume CKPT]
///   sample --ckpt CKPT [--sketch PNG] [--stroke PNG] [--reference PNG]
///          [--s-sketch F] [--s-stroke F] [--realism F] [--seed N] [--steps N] --out PNG
///   evaluate --ckpt CKPT --real DIR --n N --out JSON
///   extract-conditions --in DIR --out DIR [--low F --high F]
///   serve [--ckpt CKPT] --port N [--host H] [--workers N] [--ui DIR]
///
/// Returns 0 on success, 2 on a usage error (usage text on `err`) and 1 on a
/// runtime error.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int cli_dispatch(int argc, const char* const* argv);

}  // namespace sketchdiff

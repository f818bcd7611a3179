#pragma once

namespace iterthink {

// Full command-line front end (train / eval / analyze / plot / datagen /
// replicate-stability). Exposed so tests can drive commands in-process.
int cli_main(int argc, const char* const* argv);

}  // namespace iterthink

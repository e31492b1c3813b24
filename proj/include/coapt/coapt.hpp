#pragma once

#include "coapt/errors.hpp"
#include "coapt/tensor.hpp"
#include "coapt/ops.hpp"
#include "coapt/gradcheck.hpp"
#include "coapt/rng.hpp"
#include "coapt/transformer.hpp"
#include "coapt/tokenizer.hpp"
#include "coapt/embedding_io.hpp"
#include "coapt/prompt_assembly.hpp"
#include "coapt/encoders.hpp"
#include "coapt/meta_net.hpp"
#include "coapt/classifier.hpp"
#include "coapt/trainer.hpp"
#include "coapt/attr_vocab.hpp"
#include "coapt/config.hpp"
#include "coapt/toy_data.hpp"
#include "coapt/harness.hpp"

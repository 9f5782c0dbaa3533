// Reads an SMT-LIB 2 script on stdin, evaluates it with the wasm build of z3,
// and prints the solver output on stdout.
const { init } = require('z3-solver');

let input = '';
process.stdin.on('data', d => input += d);
process.stdin.on('end', async () => {
  const { Z3 } = await init();
  const cfg = Z3.mk_config();
  const ctx = Z3.mk_context(cfg);
  try {
    const out = await Z3.eval_smtlib2_string(ctx, input);
    process.stdout.write(out.endsWith('\n') ? out : out + '\n');
  } catch (e) {
    process.stdout.write('unknown\n(error "' + String(e).replace(/"/g, "'") + '")\n');
  }
  process.exit(0);
});

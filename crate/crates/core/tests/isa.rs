use fa3sim::isa::{parse_trace, serialize_trace, validate_program, Severity};
use fa3sim::tracegen::{gen_fa3_trace, Fa3Workload, Layout};

#[test]
fn generated_trace_survives_text_round_trip() {
    let mut w = Fa3Workload::new(2, 130, 400, 2, 2, 64);
    w.layout = Layout::Bhsd;
    let p = gen_fa3_trace(&w);
    let text = serialize_trace(&p);
    let back = parse_trace(&text).unwrap();
    assert_eq!(back, p);
    assert_eq!(serialize_trace(&back), text);
}

#[test]
fn protocol_errors_are_located() {
    let p = gen_fa3_trace(&Fa3Workload::new(1, 64, 352, 1, 1, 64));
    let text = serialize_trace(&p);
    // drop the consumer's final V release
    let last_release = text.rfind("RELEASE_STAGE").unwrap();
    let end = last_release + text[last_release..].find('\n').unwrap() + 1;
    let broken = format!("{}{}", &text[..last_release], &text[end..]);
    let diags = validate_program(&parse_trace(&broken).unwrap());
    let errors: Vec<_> = diags.iter().filter(|d| d.severity == Severity::Error).collect();
    assert!(!errors.is_empty());
    assert_eq!(errors[0].location.block_id, Some(0));
}

#[test]
fn parse_errors_carry_line_numbers() {
    let err = parse_trace("STAGES 2\nTHREAD 0 PRODUCER\nTMA_TENSOR 0x0\n").unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
}
